//! Image type, normalization, the four-filter bank and seeded affine
//! augmentation.
//!
//! Every operation here is a pure function of its inputs and keeps pixel
//! values inside `[0, 1]`. Borders are handled by reflection (`dcb|abcd|cba`)
//! throughout.

mod affine;
mod filters;
mod image;
mod io;

pub use affine::{affine_transform, augment_seed, random_augment, AffineParams, AugmentRanges};
pub use filters::{
    apply_filter_chain, gaussian_blur, gaussian_kernel, hist_equalize, median_filter,
    sobel_magnitude, FilterChainConfig, FilterStep,
};
pub use image::{normalize, Image, RawImage};
pub use io::{read_image, read_raw, write_image, write_png, write_pnm};

/// Reflect-101 index into `0..n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

#[cfg(test)]
mod tests {
    use super::reflect;

    #[test]
    fn reflect_101() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }
}
