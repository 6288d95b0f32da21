use crate::{Error, Result};

use super::ops::sigmoid_scalar;
use super::{Real, Tensor};

const LOG_FLOOR: f64 = 1e-12;

fn check_labels(n: usize, k: usize, labels: &[usize], weights: Option<&[f64]>) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{k}")));
    }
    if let Some(w) = weights {
        if w.len() != k {
            return Err(Error::Shape(format!("{} class weights for {k} classes", w.len())));
        }
    }
    Ok(())
}

/// `(1/N)·Σ w[y_i]·(−ln p_i[y_i])` with the log argument floored at 1e-12.
/// `weights = None` means every class weighs 1.
pub fn weighted_cross_entropy<T: Real>(
    probs: &Tensor<T>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<T> {
    let (n, k) = probs.dims2()?;
    check_labels(n, k, labels, weights)?;
    let floor = T::lit(LOG_FLOOR);
    let mut total = T::zero();
    for (row, &y) in probs.data().chunks(k).zip(labels) {
        let w = weights.map_or(T::one(), |w| T::lit(w[y]));
        total += w * -(row[y].max(floor)).ln();
    }
    Ok(total / T::lit(n as f64))
}

/// Gradient of [`weighted_cross_entropy`] ∘ softmax with respect to the
/// logits: `w[y_i]·(p_i − onehot(y_i))/N`.
pub fn softmax_cross_entropy_grad<T: Real>(
    probs: &Tensor<T>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<Tensor<T>> {
    let (n, k) = probs.dims2()?;
    check_labels(n, k, labels, weights)?;
    let inv_n = T::lit(1.0 / n as f64);
    let mut g = probs.clone();
    for (row, &y) in g.data_mut().chunks_mut(k).zip(labels) {
        row[y] -= T::one();
        let scale = weights.map_or(T::one(), |w| T::lit(w[y])) * inv_n;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(g)
}

/// Settings of the combined Dice + binary cross-entropy mask loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceBce {
    pub smooth: f64,
    pub bce_weight: f64,
}

impl Default for DiceBce {
    fn default() -> Self {
        DiceBce {
            smooth: 1.0,
            bce_weight: 0.5,
        }
    }
}

fn check_masks<T>(pred: &[T], gt: &[T]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Dice term `(2·Σpg + s)/(Σp + Σg + s)` and its gradient w.r.t. `p`.
fn dice<T: Real>(pred: &[T], gt: &[T], smooth: T) -> (T, Vec<T>) {
    let inter: T = pred.iter().zip(gt).map(|(&p, &g)| p * g).sum();
    let denom = pred.iter().copied().sum::<T>() + gt.iter().copied().sum::<T>() + smooth;
    let num = T::lit(2.0) * inter + smooth;
    let d2 = denom * denom;
    let grad = gt
        .iter()
        .map(|&g| (T::lit(2.0) * g * denom - num) / d2)
        .collect();
    (num / denom, grad)
}

/// `bce_weight·BCE + (1 − bce_weight)·(1 − Dice)` on probabilities, with
/// its gradient w.r.t. `pred`. Logs are floored at 1e-12; the gradient of
/// a floored log is zero.
pub fn dice_bce_loss<T: Real>(pred: &[T], gt: &[T], cfg: &DiceBce) -> Result<(T, Vec<T>)> {
    check_masks(pred, gt)?;
    let n = T::lit(pred.len() as f64);
    let floor = T::lit(LOG_FLOOR);
    let bw = T::lit(cfg.bce_weight);
    let dw = T::one() - bw;
    let (d, dgrad) = dice(pred, gt, T::lit(cfg.smooth));
    let mut bce = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for ((&p, &g), &dd) in pred.iter().zip(gt).zip(&dgrad) {
        let q = T::one() - p;
        bce -= g * p.max(floor).ln() + (T::one() - g) * q.max(floor).ln();
        let mut gb = T::zero();
        if p > floor {
            gb -= g / p;
        }
        if q > floor {
            gb += (T::one() - g) / q;
        }
        grad.push(bw * gb / n - dw * dd);
    }
    Ok((bw * bce / n + dw * (T::one() - d), grad))
}

/// Same loss as [`dice_bce_loss`] evaluated on `sigmoid(logits)`, with the
/// BCE part in its overflow-free logit form and the gradient taken w.r.t.
/// the logits.
pub fn dice_bce_with_logits<T: Real>(logits: &[T], gt: &[T], cfg: &DiceBce) -> Result<(T, Vec<T>)> {
    check_masks(logits, gt)?;
    let n = T::lit(logits.len() as f64);
    let bw = T::lit(cfg.bce_weight);
    let dw = T::one() - bw;
    let probs: Vec<T> = logits.iter().map(|&z| sigmoid_scalar(z)).collect();
    let (d, dgrad) = dice(&probs, gt, T::lit(cfg.smooth));
    let mut bce = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (((&z, &g), &p), &dd) in logits.iter().zip(gt).zip(&probs).zip(&dgrad) {
        bce += z.max(T::zero()) - z * g + (-z.abs()).exp().ln_1p();
        grad.push(bw * (p - g) / n - dw * dd * p * (T::one() - p));
    }
    Ok((bw * bce / n + dw * (T::one() - d), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let p = t(&[1, 2], &[0.0, 1.0]);
        assert_eq!(weighted_cross_entropy(&p, &[1], None).unwrap(), 0.0);
        let p = t(&[1, 2], &[0.5, 0.5]);
        let l = weighted_cross_entropy(&p, &[1], Some(&[1.0, 2.0])).unwrap();
        assert!((l - 1.386_294_361_119_890_6).abs() < 1e-12);
        let p = t(&[2, 3], &[0.2, 0.3, 0.5, 0.6, 0.1, 0.3]);
        let a = weighted_cross_entropy(&p, &[2, 0], None).unwrap();
        let b = weighted_cross_entropy(&p, &[2, 0], Some(&[1.0; 3])).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(weighted_cross_entropy(&p, &[3, 0], None).is_err());
    }

    #[test]
    fn confident_mistake_is_finite() {
        let p = t(&[1, 2], &[1.0, 0.0]);
        let l = weighted_cross_entropy(&p, &[1], None).unwrap();
        assert!((l + 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn dice_term_vanishes_on_perfect_prediction() {
        let gt = [0.0f64, 1.0, 1.0, 0.0];
        let cfg = DiceBce {
            bce_weight: 0.0,
            ..DiceBce::default()
        };
        let (l, _) = dice_bce_loss(&gt, &gt, &cfg).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn inverted_half_mask_dice_term() {
        // Σpg = 0 and Σp + Σg = N, so the Dice term is 1 − s/(N + s).
        let n = 16;
        let gt: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
        let pred: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        let cfg = DiceBce {
            bce_weight: 0.0,
            ..DiceBce::default()
        };
        let (l, _) = dice_bce_loss(&pred, &gt, &cfg).unwrap();
        assert!((l - (1.0 - 1.0 / 17.0)).abs() < 1e-12);
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let logits = [-2.0, 0.3, 1.7, -0.4, 0.9, 3.0];
        let gt = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid_scalar(z)).collect();
        let cfg = DiceBce::default();
        let (a, ga) = dice_bce_loss(&probs, &gt, &cfg).unwrap();
        let (b, gb) = dice_bce_with_logits(&logits, &gt, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
        for ((g1, g2), p) in ga.iter().zip(&gb).zip(&probs) {
            assert!((g1 * p * (1.0 - p) - g2).abs() < 1e-12);
        }
        assert!(dice_bce_loss(&probs[..3], &gt, &cfg).is_err());
    }
}
