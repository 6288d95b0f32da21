use crate::{Error, Result};

use super::{Parameter, Real, Tensor};

/// Adam hyperparameters. Defaults: lr 0.001, β₁ 0.9, β₂ 0.999, ε 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_param(p: &Parameter<T>) -> Self {
        AdamState {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Frozen parameters are left untouched
/// and their state does not advance.
pub fn adam_step<T: Real>(p: &mut Parameter<T>, s: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if p.frozen {
        return Ok(());
    }
    if let Some((i, g)) = p.grad.data().iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} of a {:?} parameter is {g}",
            p.value.shape()
        )));
    }
    s.t += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let c1 = T::lit(1.0 - cfg.beta1.powi(s.t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(s.t as i32));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let grads = p.grad.data();
    let m = s.m.data_mut();
    let v = s.v.data_mut();
    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
        let g = grads[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        *w -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: Vec::new(),
        }
    }

    /// Steps every parameter; the list must have the same order on every
    /// call. Frozen parameters are skipped.
    pub fn step(&mut self, params: Vec<(String, &mut Parameter<T>)>) -> Result<()> {
        if self.states.is_empty() {
            self.states = params.iter().map(|(_, p)| AdamState::for_param(p)).collect();
        }
        if self.states.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.states.len(),
                params.len()
            )));
        }
        for ((name, p), s) in params.into_iter().zip(&mut self.states) {
            adam_step(p, s, &self.config).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{name}: {msg}")),
                other => other,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new(Tensor::full(&[1], v));
        p.grad = Tensor::full(&[1], g);
        p
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut p = param(0.0, 1.0);
        let mut s = AdamState::for_param(&p);
        adam_step(&mut p, &mut s, &AdamConfig::default()).unwrap();
        let delta = p.value.data()[0];
        assert!((delta - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((delta + 0.000_999_999).abs() < 1e-9);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = param(0.37, 0.0);
        let mut s = AdamState::for_param(&p);
        for _ in 0..50 {
            adam_step(&mut p, &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.value.data()[0], 0.37);
    }

    #[test]
    fn frozen_parameter_never_moves() {
        let mut p = param(1.25, 3.0);
        p.frozen = true;
        let mut s = AdamState::for_param(&p);
        for _ in 0..10 {
            adam_step(&mut p, &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.value.data()[0].to_bits(), 1.25f64.to_bits());
        assert_eq!(s.t, 0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = param(0.0, f64::NAN);
        let mut s = AdamState::for_param(&p);
        assert!(matches!(
            adam_step(&mut p, &mut s, &AdamConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }
}
