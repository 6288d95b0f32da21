use crate::nncore::{Real, Tensor};
use crate::{Error, Result};

use super::reflect;

/// 8-bit image as decoded from disk, row-major and channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Intensities in `[0, 1]`, row-major, channel-interleaved; 1 or 3
/// channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Divides every 8-bit sample by 255.
pub fn normalize(raw: &RawImage) -> Image {
    Image {
        height: raw.height,
        width: raw.width,
        channels: raw.channels,
        data: raw.data.iter().map(|&v| v as f32 / 255.0).collect(),
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Image(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("{channels} channels; expected 1 or 3")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Image(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from a per-pixel function, clamping into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp01(f(y, x, c)));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image::from_fn(height, width, channels, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Pixel at reflected coordinates.
    #[inline]
    pub(crate) fn get_reflect(&self, y: isize, x: isize, c: usize) -> f32 {
        self.get(reflect(y, self.height), reflect(x, self.width), c)
    }

    /// Copy of one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    /// ITU-R 601 luma for colour images; identity for grayscale.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, 1, |y, x, _| {
            0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
        })
    }

    pub fn to_gray_or_rgb(&self, channels: usize) -> Image {
        match (self.channels, channels) {
            (a, b) if a == b => self.clone(),
            (3, 1) => self.luma(),
            (1, 3) => Image::from_fn(self.height, self.width, 3, |y, x, _| self.get(y, x, 0)),
            _ => unreachable!("images carry 1 or 3 channels"),
        }
    }

    /// Quantizes to 8 bits with round-half-up.
    pub fn to_raw(&self) -> RawImage {
        RawImage {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| quantize(v)).collect(),
        }
    }

    /// Bilinear resize with pixel-centre alignment. Same-size resize is the
    /// identity.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Image::from_fn(height, width, self.channels, |y, x, c| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            self.sample_bilinear(fy, fx, c)
        })
    }

    /// Bilinear sample at a real-valued position, reflecting outside.
    pub(crate) fn sample_bilinear(&self, fy: f64, fx: f64, c: usize) -> f32 {
        let y0 = fy.floor();
        let x0 = fx.floor();
        let ty = fy - y0;
        let tx = fx - x0;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let v00 = self.get_reflect(y0, x0, c) as f64;
        let v01 = self.get_reflect(y0, x0 + 1, c) as f64;
        let v10 = self.get_reflect(y0 + 1, x0, c) as f64;
        let v11 = self.get_reflect(y0 + 1, x0 + 1, c) as f64;
        let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
        v as f32
    }

    /// Sub-image `[y0, y1) × [x0, x1)`.
    pub fn crop(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> Image {
        Image::from_fn(y1 - y0, x1 - x0, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.data.len() as f64)
            .sqrt()
    }

    /// `1×C×H×W` tensor (planar layout).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w, c) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            T::lit(self.data[p * c + ch] as f64)
        })
    }

    /// Inverse of [`Image::to_tensor`] for a `1×C×H×W` tensor with `C` of 1
    /// or 3; values are clamped into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Image> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || (c != 1 && c != 3) {
            return Err(Error::Shape(format!("cannot view {:?} as an image", t.shape())));
        }
        Ok(Image::from_fn(h, w, c, |y, x, ch| {
            t.data()[(ch * h + y) * w + x].as_f64() as f32
        }))
    }
}

#[inline]
pub(crate) fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (clamp01(v) as f64 * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        let raw = RawImage {
            height: 1,
            width: 3,
            channels: 1,
            data: vec![255, 0, 128],
        };
        let img = normalize(&raw);
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 0.0);
        assert!((img.data()[2] as f64 - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(img.to_raw(), raw);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(3, 4, 3, |y, x, c| (y * 12 + x * 3 + c) as f32 / 40.0);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, 3, 3, 4]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = Image::from_fn(5, 7, 1, |y, x, _| ((y * 7 + x) % 5) as f32 / 4.0);
        assert_eq!(img.resize(5, 7), img);
        let up = img.resize(10, 14);
        assert_eq!((up.height(), up.width()), (10, 14));
    }
}
