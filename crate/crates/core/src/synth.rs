//! Seeded synthetic datasets for toy experiments and tests.
//!
//! * Blob textures: one elliptical blob per image on a noisy background
//!   with a slow illumination ramp, filled with a class-specific texture
//!   (0 smooth, 1 stripes, 2 checkerboard). Textures run close to the
//!   horizontal axis. The blob outline doubles as a segmentation mask.
//! * Noisy ellipses: a bright ellipse on a darker background with Gaussian
//!   noise, plus its binary mask.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::imageops::{write_png, Image};
use crate::segmentation::MaskImage;
use crate::{rng, Error, Result};

pub const BLOB_CLASSES: [&str; 3] = ["smooth", "striped", "checker"];

fn gaussian(r: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = r.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn random(r: &mut ChaCha8Rng, size: usize, min_frac: f64, max_frac: f64) -> Self {
        let s = size as f64;
        let ry = s * r.random_range(min_frac..max_frac);
        let rx = s * r.random_range(min_frac..max_frac);
        let margin = ry.max(rx) * 0.8;
        Ellipse {
            cy: r.random_range(margin..(s - margin).max(margin + 1e-9)),
            cx: r.random_range(margin..(s - margin).max(margin + 1e-9)),
            ry,
            rx,
            angle: r.random_range(0.0..std::f64::consts::PI),
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// One blob-texture image of class `class` (0..3) with its blob mask.
pub fn blob_texture(class: usize, size: usize, seed: u64) -> (Image, MaskImage) {
    assert!(class < BLOB_CLASSES.len(), "blob class out of range");
    let mut r = rng::stream(seed, &[rng::name_key("blob"), class as u64]);
    let blob = Ellipse::random(&mut r, size, 0.28, 0.42);
    let bg = r.random_range(0.15..0.35);
    // slow illumination ramp across the skin background
    let ramp: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (rs, rc) = ramp.sin_cos();
    let tint: [f64; 3] = [r.random_range(0.6..0.9), r.random_range(0.35..0.6), r.random_range(0.25..0.5)];
    let period = r.random_range(7.0..9.0);
    let phase = r.random_range(0.0..period);
    let theta: f64 = r.random_range(-0.25..0.25);
    let (st, ct) = theta.sin_cos();
    let noise: Vec<f64> = (0..size * size * 3).map(|_| 0.04 * gaussian(&mut r)).collect();
    let mask = MaskImage::from_fn(size, size, |y, x| blob.contains(y, x) as u8 as f32);
    let img = Image::from_fn(size, size, 3, |y, x, c| {
        let base = if mask.get(y, x) == 1.0 {
            let u = ct * x as f64 + st * y as f64 + phase;
            let v = -st * x as f64 + ct * y as f64 + phase;
            let texture = match class {
                0 => 1.0,
                1 => 0.6 + 0.4 * (std::f64::consts::TAU * u / period).sin().signum(),
                _ => {
                    let parity = ((u / period * 2.0).floor() as i64 + (v / period * 2.0).floor() as i64).rem_euclid(2);
                    if parity == 0 { 1.0 } else { 0.2 }
                }
            };
            tint[c] * texture
        } else {
            let t = (rc * x as f64 + rs * y as f64) / size as f64;
            bg + 0.15 * t
        };
        (base + noise[(y * size + x) * 3 + c]) as f32
    });
    (img, mask)
}

/// `per_class` images of every blob class, interleaved by class. Labels are
/// class ids.
pub fn blob_dataset(per_class: usize, size: usize, seed: u64) -> Vec<(Image, usize, MaskImage)> {
    let mut out = Vec::with_capacity(per_class * BLOB_CLASSES.len());
    for i in 0..per_class {
        for class in 0..BLOB_CLASSES.len() {
            let (img, mask) = blob_texture(class, size, rng::derive(seed, &[i as u64]));
            out.push((img, class, mask));
        }
    }
    out
}

/// A bright noisy ellipse on a dark background and its exact mask.
pub fn ellipse_pair(size: usize, noise: f64, seed: u64) -> (Image, MaskImage) {
    let mut r = rng::stream(seed, &[rng::name_key("ellipse")]);
    let e = Ellipse::random(&mut r, size, 0.15, 0.32);
    let fg = r.random_range(0.65..0.9);
    let bg = r.random_range(0.1..0.35);
    let mask = MaskImage::from_fn(size, size, |y, x| e.contains(y, x) as u8 as f32);
    let tint = [1.0, r.random_range(0.7..1.0), r.random_range(0.6..1.0)];
    let n: Vec<f64> = (0..size * size).map(|_| noise * gaussian(&mut r)).collect();
    let img = Image::from_fn(size, size, 3, |y, x, c| {
        let v = if mask.get(y, x) == 1.0 { fg } else { bg };
        (v * tint[c] + n[y * size + x]) as f32
    });
    (img, mask)
}

pub fn ellipse_dataset(n: usize, size: usize, noise: f64, seed: u64) -> Vec<(Image, MaskImage)> {
    (0..n).map(|i| ellipse_pair(size, noise, rng::derive(seed, &[i as u64]))).collect()
}

/// Writes a blob-texture dataset as PNG images and masks under `dir`, plus
/// `manifest.csv` (with a `# labels:` line and a mask column). `counts`
/// gives the number of images per class. Returns the manifest path.
pub fn write_blob_manifest(dir: &Path, counts: &[usize], size: usize, seed: u64) -> Result<PathBuf> {
    if counts.len() < 2 || counts.len() > BLOB_CLASSES.len() {
        return Err(Error::InvalidArgument(format!("blob datasets have 2 or 3 classes, got {}", counts.len())));
    }
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut text = format!("# labels: {}\npath,label,mask\n", BLOB_CLASSES[..counts.len()].join(","));
    for (class, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let (img, mask) = blob_texture(class, size, rng::derive(seed, &[i as u64]));
            let stem = format!("{}_{i:04}", BLOB_CLASSES[class]);
            write_png(&img_dir.join(format!("{stem}.png")), &img, &[])?;
            write_png(&img_dir.join(format!("{stem}_mask.png")), mask.image(), &[])?;
            text.push_str(&format!("images/{stem}.png,{},images/{stem}_mask.png\n", BLOB_CLASSES[class]));
        }
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
