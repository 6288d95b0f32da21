use rand::Rng;

use crate::{rng, Error, Result};

use super::Image;

/// Geometric augmentation parameters. The warp rotates by `rotation_deg`
/// (clockwise on screen, since y points down), scales by `zoom` about the
/// image centre, mirrors, then shifts by `tx_frac·W`, `ty_frac·H`. Zoom
/// above 1 crops into the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub zoom: f64,
    pub tx_frac: f64,
    pub ty_frac: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Default for AffineParams {
    fn default() -> Self {
        AffineParams::identity()
    }
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            rotation_deg: 0.0,
            zoom: 1.0,
            tx_frac: 0.0,
            ty_frac: 0.0,
            flip_h: false,
            flip_v: false,
        }
    }
}

/// Inverse-mapped affine warp with bilinear sampling and reflected fill.
pub fn affine_transform(img: &Image, p: &AffineParams) -> Result<Image> {
    if !(p.zoom > 0.0) || !p.zoom.is_finite() {
        return Err(Error::InvalidArgument(format!("zoom must be positive, got {}", p.zoom)));
    }
    let (h, w) = (img.height(), img.width());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let tx = p.tx_frac * w as f64;
    let ty = p.ty_frac * h as f64;
    Ok(Image::from_fn(h, w, img.channels(), |y, x, c| {
        let dx = x as f64 - cx - tx;
        let dy = y as f64 - cy - ty;
        let mut rx = (cos * dx + sin * dy) / p.zoom;
        let mut ry = (cos * dy - sin * dx) / p.zoom;
        if p.flip_h {
            rx = -rx;
        }
        if p.flip_v {
            ry = -ry;
        }
        img.sample_bilinear(cy + ry, cx + rx, c)
    }))
}

/// Sampling ranges for [`random_augment`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRanges {
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    /// Shift fractions drawn from `[-max_shift, max_shift]` per axis.
    pub max_shift: f64,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rotation_deg: 30.0,
            zoom_min: 0.8,
            zoom_max: 1.2,
            max_shift: 0.1,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
        }
    }
}

impl AugmentRanges {
    /// Ranges that always produce the identity warp.
    pub fn none() -> Self {
        AugmentRanges {
            rotation_deg: 0.0,
            zoom_min: 1.0,
            zoom_max: 1.0,
            max_shift: 0.0,
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.zoom_min > 0.0
            && self.zoom_min <= self.zoom_max
            && self.max_shift >= 0.0
            && (0.0..=1.0).contains(&self.flip_h_prob)
            && (0.0..=1.0).contains(&self.flip_v_prob)
            && self.zoom_max.is_finite()
            && self.rotation_deg.is_finite()
            && self.max_shift.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid augmentation ranges {self:?}")))
        }
    }

    /// Draws parameters uniformly from the ranges. Zero-width ranges yield
    /// their single value without consuming randomness.
    pub fn sample(&self, r: &mut impl Rng) -> AffineParams {
        let sym = |r: &mut dyn rand::RngCore, m: f64| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
        let rotation_deg = sym(r, self.rotation_deg);
        let zoom = if self.zoom_max > self.zoom_min {
            r.random_range(self.zoom_min..=self.zoom_max)
        } else {
            self.zoom_min
        };
        let tx_frac = sym(r, self.max_shift);
        let ty_frac = sym(r, self.max_shift);
        let flip_h = self.flip_h_prob > 0.0 && r.random_bool(self.flip_h_prob);
        let flip_v = self.flip_v_prob > 0.0 && r.random_bool(self.flip_v_prob);
        AffineParams {
            rotation_deg,
            zoom,
            tx_frac,
            ty_frac,
            flip_h,
            flip_v,
        }
    }
}

/// Seed for augmentation number `aug_index` of sample `sample_index`.
pub fn augment_seed(base: u64, sample_index: u64, aug_index: u64) -> u64 {
    rng::derive(base, &[sample_index, aug_index])
}

/// Samples parameters from `ranges` with a generator keyed by `seed` and
/// applies [`affine_transform`].
pub fn random_augment(img: &Image, seed: u64, ranges: &AugmentRanges) -> Result<Image> {
    ranges.validate()?;
    let params = ranges.sample(&mut rng::stream(seed, &[]));
    affine_transform(img, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern() -> Image {
        Image::from_fn(9, 12, 3, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f32 / 10.0)
    }

    #[test]
    fn identity_is_exact() {
        let img = pattern();
        assert_eq!(affine_transform(&img, &AffineParams::identity()).unwrap(), img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = pattern();
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let p = AffineParams {
                flip_h: h,
                flip_v: v,
                ..AffineParams::identity()
            };
            let once = affine_transform(&img, &p).unwrap();
            assert_ne!(once, img);
            assert_eq!(affine_transform(&once, &p).unwrap(), img);
        }
    }

    #[test]
    fn non_positive_zoom_rejected() {
        let p = AffineParams {
            zoom: 0.0,
            ..AffineParams::identity()
        };
        assert!(affine_transform(&pattern(), &p).is_err());
    }

    #[test]
    fn augment_is_deterministic_and_degenerate_ranges_are_identity() {
        let img = pattern();
        let r = AugmentRanges::default();
        assert_eq!(random_augment(&img, 9, &r).unwrap(), random_augment(&img, 9, &r).unwrap());
        assert_eq!(random_augment(&img, 9, &AugmentRanges::none()).unwrap(), img);
    }

    #[test]
    fn flip_frequency_over_many_draws() {
        let r = AugmentRanges::default();
        let flips = (0..1000)
            .filter(|&i| r.sample(&mut rng::stream(augment_seed(17, i, 0), &[])).flip_h)
            .count();
        assert!((450..=550).contains(&flips), "{flips}");
    }
}
