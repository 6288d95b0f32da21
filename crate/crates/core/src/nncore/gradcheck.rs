//! Central finite-difference gradient checking.

use serde::Serialize;

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Relative errors below this magnitude scale are measured absolutely, so
/// coordinates with a vanishing true gradient do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` (the gradient of `f` at `x`) against central
/// differences with step [`STEP`]. `coords` restricts the comparison to a
/// subset of coordinates; `None` checks all of them.
pub fn grad_check(
    name: &str,
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length must match the point");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.to_vec();
    let mut worst = (0.0f64, 0usize);
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + STEP;
        let up = f(&probe);
        probe[i] = orig - STEP;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
        }
    }
    GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
        tolerance,
        passed: worst.0 < tolerance,
    }
}

/// Evenly spaced coordinate sample of at most `max` indices out of `len`,
/// always including both ends.
pub fn spread_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..max)
        .map(|i| i * (len - 1) / (max - 1).max(1))
        .collect();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_corrupted_gradient_fails() {
        let f = |x: &[f64]| x.iter().map(|v| v * v * v).sum::<f64>();
        let x = [0.3, -1.2, 2.0];
        let g: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        let r = grad_check("cube", f, &x, &g, None, 1e-6);
        assert!(r.passed, "{r:?}");
        let mut bad = g.clone();
        bad[1] *= 1.01;
        let r = grad_check("cube", f, &x, &bad, None, 1e-6);
        assert!(!r.passed);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn spread_covers_ends() {
        assert_eq!(spread_coords(5, 10), vec![0, 1, 2, 3, 4]);
        let s = spread_coords(1000, 7);
        assert_eq!(s.first(), Some(&0));
        assert_eq!(s.last(), Some(&999));
        assert_eq!(s.len(), 7);
    }
}
