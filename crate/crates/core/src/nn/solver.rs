//! Stochastic gradient descent with heavy-ball momentum.
//!
//! Per parameter `w` with gradient `g` and velocity `v`:
//!
//! ```text
//! g' = g + weight_decay * w
//! v  = momentum * v - base_lr * g'
//! w  = w + v
//! ```

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrPolicy {
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverType {
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub base_lr: f64,
    pub lr_policy: LrPolicy,
    pub momentum: f64,
    pub weight_decay: f64,
    pub solver_type: SolverType,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            lr_policy: LrPolicy::Fixed,
            momentum: 0.9,
            weight_decay: 1e-5,
            solver_type: SolverType::Sgd,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub iteration: usize,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            iteration: 0,
        }
    }
}

/// Applies one update in place. A non-finite gradient leaves the parameters
/// untouched and reports divergence at the current iteration.
pub fn sgd_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut SgdState<T>,
    cfg: &SolverConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Shape("parameter, gradient and velocity counts differ".into()));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Diverged {
            iteration: state.iteration,
        });
    }
    let lr = T::from_f64(cfg.base_lr);
    let mu = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let decayed = gi + wd * *w;
            *vi = mu * *vi - lr * decayed;
            *w = *w + *vi;
        }
    }
    state.iteration += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn plain_descent_without_momentum_or_decay() {
        let cfg = SolverConfig { base_lr: 0.1, momentum: 0.0, weight_decay: 0.0, ..Default::default() };
        let mut params = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let grads = vec![Tensor::from_vec(&[3], vec![0.3, 0.1, -4.0]).unwrap()];
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert_eq!(params[0].data(), &[1.0 - 0.1 * 0.3, -2.0 - 0.1 * 0.1, 0.5 - 0.1 * -4.0]);
    }

    #[test]
    fn pure_momentum_step() {
        let cfg = SolverConfig { weight_decay: 0.0, ..Default::default() };
        let mut params = vec![scalar(3.0)];
        let mut state = SgdState { velocity: vec![scalar(1.0)], iteration: 0 };
        sgd_step(&mut params, &[scalar(0.0)], &mut state, &cfg).unwrap();
        assert!((state.velocity[0].data()[0] - 0.9).abs() < 1e-15);
        assert!((params[0].data()[0] - 3.9).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_signals_divergence() {
        let mut params = vec![scalar(1.0)];
        let mut state = SgdState::new(&params);
        state.iteration = 7;
        let err = sgd_step(&mut params, &[scalar(f64::NAN)], &mut state, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 7 }));
        assert_eq!(params[0].data(), &[1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { base_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { weight_decay: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn descent_decreases_convex_quadratic(
            curv in proptest::collection::vec(0.1f64..10.0, 1..6),
            start in proptest::collection::vec(-5.0f64..5.0, 6),
            frac in 0.05f64..0.95,
        ) {
            // f(w) = 0.5 * sum(a_i w_i^2), L = max a_i, lr < 2/L
            let lmax = curv.iter().cloned().fold(0.0, f64::max);
            let cfg = SolverConfig { base_lr: frac * 2.0 / lmax, momentum: 0.0, weight_decay: 0.0, ..Default::default() };
            let w0: Vec<f64> = start[..curv.len()].to_vec();
            proptest::prop_assume!(w0.iter().any(|v| v.abs() > 1e-3));
            let f = |w: &[f64]| 0.5 * w.iter().zip(&curv).map(|(w, a)| a * w * w).sum::<f64>();
            let mut params = vec![Tensor::from_vec(&[w0.len()], w0.clone()).unwrap()];
            let grads = vec![Tensor::from_vec(&[w0.len()], w0.iter().zip(&curv).map(|(w, a)| a * w).collect()).unwrap()];
            let mut state = SgdState::new(&params);
            sgd_step(&mut params, &grads, &mut state, &cfg).unwrap();
            proptest::prop_assert!(f(params[0].data()) < f(&w0));
        }
    }
}
