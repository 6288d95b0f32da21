//! 8-bit PNG and binary PGM/PPM (P5/P6) reading and writing.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

use super::{normalize, Image, RawImage};

fn is_pnm(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == b'P' && (bytes[1] == b'5' || bytes[1] == b'6')
}

/// Decodes a PNG, PGM or PPM file into 8-bit samples. Alpha is dropped,
/// palettes are expanded and 16-bit data is reduced to its high byte.
pub fn read_raw(path: &Path) -> Result<RawImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let raw = if is_pnm(&bytes) {
        decode_pnm(&bytes)
    } else {
        decode_png(&bytes)
    };
    raw.map_err(|msg| Error::Image(format!("{}: {msg}", path.display())))
}

pub fn read_image(path: &Path) -> Result<Image> {
    read_raw(path).map(|r| normalize(&r))
}

fn decode_png(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_ch = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("unexpanded palette".into()),
    };
    let channels = if src_ch >= 3 { 3 } else { 1 };
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * src_ch].chunks(src_ch) {
            data.extend_from_slice(&px[..channels]);
        }
    }
    Ok(RawImage {
        height: h,
        width: w,
        channels,
        data,
    })
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed header".to_string())?;
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported header {w}x{h} maxval {maxval}"));
    }
    let n = w * h * channels;
    let raster = bytes.get(pos..).unwrap_or_default();
    let data: Vec<u8> = if maxval < 256 {
        if raster.len() < n {
            return Err("truncated raster".into());
        }
        raster[..n]
            .iter()
            .map(|&v| ((v as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
            .collect()
    } else {
        if raster.len() < 2 * n {
            return Err("truncated raster".into());
        }
        raster[..2 * n]
            .chunks(2)
            .map(|c| {
                let v = u16::from_be_bytes([c[0], c[1]]) as u64;
                ((v * 255 + maxval as u64 / 2) / maxval as u64) as u8
            })
            .collect()
    };
    Ok(RawImage {
        height: h,
        width: w,
        channels,
        data,
    })
}

/// Writes an 8-bit PNG with optional `tEXt` entries.
pub fn write_png(path: &Path, img: &Image, text: &[(&str, &str)]) -> Result<()> {
    let raw = img.to_raw();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), raw.width as u32, raw.height as u32);
    enc.set_color(if raw.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Image(format!("{}: {e}", path.display()));
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(to_err)?;
    }
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&raw.data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Writes binary PGM (1 channel) or PPM (3 channels) with an optional
/// header comment.
pub fn write_pnm(path: &Path, img: &Image, comment: Option<&str>) -> Result<()> {
    let raw = img.to_raw();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let magic = if raw.channels == 3 { "P6" } else { "P5" };
    let mut header = format!("{magic}\n");
    if let Some(c) = comment {
        for line in c.lines() {
            header.push_str(&format!("# {line}\n"));
        }
    }
    header.push_str(&format!("{} {}\n255\n", raw.width, raw.height));
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&raw.data))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Chooses the encoder from the extension (`.pgm`/`.ppm`/`.pnm` or PNG).
pub fn write_image(path: &Path, img: &Image, note: Option<&str>) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm" | "ppm" | "pnm") => write_pnm(path, img, note),
        _ => match note {
            Some(n) => write_png(path, img, &[("Comment", n)]),
            None => write_png(path, img, &[]),
        },
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ch: usize) -> Image {
        Image::from_fn(5, 7, ch, |y, x, c| ((y * 7 + x) * (c + 1) % 256) as f32 / 255.0)
    }

    #[test]
    fn png_and_pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for ch in [1, 3] {
            let img = sample(ch);
            for name in ["a.png", "a.pgm", "a.ppm"] {
                if (name.ends_with("pgm") && ch == 3) || (name.ends_with("ppm") && ch == 1) {
                    continue;
                }
                let p = dir.path().join(format!("{ch}{name}"));
                write_image(&p, &img, Some("seed=1")).unwrap();
                let back = read_image(&p).unwrap();
                assert_eq!(back.to_raw(), img.to_raw(), "{name}");
            }
        }
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(read_image(&p).is_err());
        std::fs::write(&p, b"P5\n4 4\n255\n\x01").unwrap();
        assert!(read_image(&p).is_err());
    }
}
