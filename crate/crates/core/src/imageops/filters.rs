use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

use super::Image;

fn check_ksize(ksize: usize) -> Result<()> {
    if ksize < 3 || ksize % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and at least 3, got {ksize}"
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps `∝ exp(−i²/(2σ²))` for `i ∈ [−r, r]`.
pub fn gaussian_kernel(sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    check_ksize(ksize)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let r = (ksize / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, sigma: f64, ksize: usize) -> Result<Image> {
    let k = gaussian_kernel(sigma, ksize)?;
    let r = (ksize / 2) as isize;
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut tmp = vec![0.0f64; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                tmp[(y * w + x) * ch + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * img.get_reflect(y as isize, x as isize + i as isize - r, c) as f64)
                    .sum();
            }
        }
    }
    Ok(Image::from_fn(h, w, ch, |y, x, c| {
        let v = k
            .iter()
            .enumerate()
            .map(|(i, kv)| {
                let yy = super::reflect(y as isize + i as isize - r, h);
                kv * tmp[(yy * w + x) * ch + c]
            })
            .sum::<f64>();
        v as f32
    }))
}

/// Per-channel median of each `ksize×ksize` window, reflected borders.
pub fn median_filter(img: &Image, ksize: usize) -> Result<Image> {
    check_ksize(ksize)?;
    let r = (ksize / 2) as isize;
    let mut window = Vec::with_capacity(ksize * ksize);
    Ok(Image::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        window.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                window.push(img.get_reflect(y as isize + dy, x as isize + dx, c));
            }
        }
        let mid = window.len() / 2;
        *window.select_nth_unstable_by(mid, f32::total_cmp).1
    }))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel gradient magnitude `sqrt(Gx² + Gy²)/(4√2)` of the luma, as a
/// single-channel image.
pub fn sobel_magnitude(img: &Image) -> Image {
    let luma = img.luma();
    let norm = 4.0 * std::f64::consts::SQRT_2;
    Image::from_fn(luma.height(), luma.width(), 1, |y, x, _| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for (i, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
            for j in 0..3 {
                let v = luma.get_reflect(y as isize + i as isize - 1, x as isize + j as isize - 1, 0) as f64;
                gx += rx[j] * v;
                gy += ry[j] * v;
            }
        }
        ((gx * gx + gy * gy).sqrt() / norm).min(1.0) as f32
    })
}

/// Per-channel histogram equalization over 256 bins. A constant channel
/// is returned unchanged.
pub fn hist_equalize(img: &Image) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let n = h * w;
    let bin = |v: f32| (v as f64 * 255.0).round().clamp(0.0, 255.0) as usize;
    let mut lut = vec![[0f32; 256]; ch];
    let mut constant = vec![false; ch];
    for c in 0..ch {
        let mut hist = [0usize; 256];
        for p in 0..n {
            hist[bin(img.data()[p * ch + c])] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, &count) in hist.iter().enumerate() {
            acc += count;
            cdf[i] = acc;
        }
        let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if cdf_min == n {
            constant[c] = true;
            continue;
        }
        for (i, entry) in lut[c].iter_mut().enumerate() {
            let scaled = (cdf[i].saturating_sub(cdf_min)) as f64 / (n - cdf_min) as f64 * 255.0;
            *entry = (scaled.round() / 255.0) as f32;
        }
    }
    Image::from_fn(h, w, ch, |y, x, c| {
        let v = img.get(y, x, c);
        if constant[c] {
            v
        } else {
            lut[c][bin(v)]
        }
    })
}

/// One stage of a preprocessing chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterStep {
    Gaussian { sigma: f64, ksize: usize },
    Median { ksize: usize },
    Sobel,
    HistEq,
}

impl FilterStep {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FilterStep::Gaussian { sigma, ksize } => gaussian_kernel(sigma, ksize).map(|_| ()),
            FilterStep::Median { ksize } => check_ksize(ksize),
            FilterStep::Sobel | FilterStep::HistEq => Ok(()),
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        match *self {
            FilterStep::Gaussian { sigma, ksize } => gaussian_blur(img, sigma, ksize),
            FilterStep::Median { ksize } => median_filter(img, ksize),
            FilterStep::Sobel => Ok(sobel_magnitude(img)),
            FilterStep::HistEq => Ok(hist_equalize(img)),
        }
    }
}

impl fmt::Display for FilterStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterStep::Gaussian { sigma, ksize } => write!(f, "gaussian({sigma:?},{ksize})"),
            FilterStep::Median { ksize } => write!(f, "median({ksize})"),
            FilterStep::Sobel => f.write_str("sobel"),
            FilterStep::HistEq => f.write_str("hist_eq"),
        }
    }
}

impl FromStr for FilterStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("unknown filter step `{s}`"));
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => {
                let inner = rest.strip_suffix(')').ok_or_else(bad)?;
                (n.trim(), inner.split(',').map(str::trim).collect::<Vec<_>>())
            }
            None => (s, Vec::new()),
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let step = match (name, args.as_slice()) {
            ("gaussian", [sigma, k]) => FilterStep::Gaussian {
                sigma: num(sigma)?,
                ksize: int(k)?,
            },
            ("median", [k]) => FilterStep::Median { ksize: int(k)? },
            ("sobel", []) => FilterStep::Sobel,
            ("hist_eq", []) => FilterStep::HistEq,
            _ => return Err(bad()),
        };
        step.validate()?;
        Ok(step)
    }
}

/// Ordered filter chain, applied left to right.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterChainConfig {
    pub steps: Vec<FilterStep>,
}

impl Default for FilterChainConfig {
    /// `gaussian(1.0, 5) → median(3) → hist_eq`.
    fn default() -> Self {
        FilterChainConfig {
            steps: vec![
                FilterStep::Gaussian {
                    sigma: 1.0,
                    ksize: 5,
                },
                FilterStep::Median { ksize: 3 },
                FilterStep::HistEq,
            ],
        }
    }
}

impl FilterChainConfig {
    pub fn empty() -> Self {
        FilterChainConfig { steps: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        self.steps.iter().try_for_each(FilterStep::validate)
    }
}

impl fmt::Display for FilterChainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.steps.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.steps.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(", "))
    }
}

impl FromStr for FilterChainConfig {
    type Err = Error;

    /// Comma-separated steps, e.g. `gaussian(1.0,5), median(3), hist_eq`;
    /// `none` or an empty string is the empty chain.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(FilterChainConfig::empty());
        }
        let mut steps = Vec::new();
        let mut depth = 0usize;
        let mut start = 0;
        for (i, ch) in s.char_indices() {
            match ch {
                '(' => depth += 1,
                ')' => depth = depth.saturating_sub(1),
                ',' if depth == 0 => {
                    steps.push(s[start..i].parse()?);
                    start = i + 1;
                }
                _ => {}
            }
        }
        steps.push(s[start..].parse()?);
        Ok(FilterChainConfig { steps })
    }
}

/// Applies the chain's filters left to right; the empty chain is the
/// identity.
pub fn apply_filter_chain(img: &Image, cfg: &FilterChainConfig) -> Result<Image> {
    cfg.steps.iter().try_fold(img.clone(), |acc, step| step.apply(&acc))
}


#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, vals: &[f32]) -> Image {
        Image::new(h, w, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn kernel_sigma_one_size_three() {
        let k = gaussian_kernel(1.0, 3).unwrap();
        assert!((k[0] - 0.274_068_619).abs() < 1e-8);
        assert!((k[1] - 0.451_862_762).abs() < 1e-8);
        assert_eq!(k[0], k[2]);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_kernel_arguments() {
        assert!(gaussian_kernel(1.0, 4).is_err());
        assert!(gaussian_kernel(0.0, 3).is_err());
        assert!(gaussian_kernel(-1.0, 3).is_err());
        assert!(median_filter(&Image::filled(4, 4, 1, 0.5), 2).is_err());
    }

    #[test]
    fn blur_keeps_constant_image() {
        let img = Image::filled(9, 6, 3, 0.7);
        assert_eq!(gaussian_blur(&img, 1.3, 5).unwrap(), img);
    }

    #[test]
    fn median_examples() {
        let vals: Vec<f32> = (1..=9).map(|v| v as f32 / 9.0).collect();
        let out = median_filter(&gray(3, 3, &vals), 3).unwrap();
        assert_eq!(out.get(1, 1, 0), 5.0 / 9.0);
        let mut salt = vec![0.0; 25];
        salt[12] = 1.0;
        let out = median_filter(&gray(5, 5, &salt), 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_vertical_step() {
        let img = Image::from_fn(6, 8, 1, |_, x, _| if x >= 4 { 1.0 } else { 0.0 });
        let g = sobel_magnitude(&img);
        for y in 0..6 {
            assert!((g.get(y, 3, 0) as f64 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
            assert!((g.get(y, 4, 0) as f64 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
            assert_eq!(g.get(y, 1, 0), 0.0);
        }
        assert!(sobel_magnitude(&Image::filled(5, 5, 3, 0.4)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hist_eq_examples() {
        let img = gray(2, 2, &[100.0 / 255.0, 100.0 / 255.0, 200.0 / 255.0, 200.0 / 255.0]);
        assert_eq!(hist_equalize(&img).data(), &[0.0, 0.0, 1.0, 1.0]);
        let flat = Image::filled(3, 3, 1, 0.3);
        assert_eq!(hist_equalize(&flat), flat);
        let two = gray(1, 4, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(hist_equalize(&two), two);
    }

    #[test]
    fn chain_parsing_and_composition() {
        let cfg: FilterChainConfig = "gaussian(1.0,5), median(3), hist_eq".parse().unwrap();
        assert_eq!(cfg, FilterChainConfig::default());
        assert_eq!(cfg.to_string().parse::<FilterChainConfig>().unwrap(), cfg);
        assert_eq!("none".parse::<FilterChainConfig>().unwrap(), FilterChainConfig::empty());
        assert!("gaussian(1.0,4)".parse::<FilterChainConfig>().is_err());
        assert!("blur".parse::<FilterChainConfig>().is_err());

        let img = Image::from_fn(8, 8, 3, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f32 / 6.0);
        assert_eq!(apply_filter_chain(&img, &FilterChainConfig::empty()).unwrap(), img);
        let single = FilterChainConfig {
            steps: vec![FilterStep::Gaussian { sigma: 0.8, ksize: 3 }],
        };
        assert_eq!(
            apply_filter_chain(&img, &single).unwrap(),
            gaussian_blur(&img, 0.8, 3).unwrap()
        );
    }
}
