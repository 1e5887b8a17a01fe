//! Central finite-difference gradient checking in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::softmax_cross_entropy;
use super::model::{InputSpec, LayerSpec, Model, ModelConfig};
use super::tensor::Tensor;
use crate::error::Result;

/// Pairs where both the analytic and numeric magnitudes fall below this are
/// counted as skipped rather than compared.
pub const SKIP_BELOW: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Flat index of the worst pair across all compared tensors.
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|)`, or `None` when both are negligible.
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    if scale < SKIP_BELOW {
        return None;
    }
    Some((analytic - numeric).abs() / scale)
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0, worst_index: 0 };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        match relative_error(a, n) {
            Some(e) => {
                report.checked += 1;
                // NaN compares false, so route it through explicitly
                if e > report.max_rel_error || e.is_nan() {
                    report.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
                    report.worst_index = i;
                }
            }
            None => report.skipped += 1,
        }
    }
    report
}

/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every coordinate.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let plus = f(&probe);
            probe[i] = x[i] - eps;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Backpropagated gradients of the mean cross-entropy, flattened in
/// parameter order.
pub fn analytic_gradients(model: &Model<f64>, input: &Tensor<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let (logits, cache) = model.forward_train(input)?;
    let (_, grad) = softmax_cross_entropy(&logits, labels)?;
    let grads = model.backward(&cache, &grad)?;
    Ok(grads.into_iter().flat_map(Tensor::into_data).collect())
}

pub fn numeric_gradients(model: &Model<f64>, input: &Tensor<f64>, labels: &[usize], eps: f64) -> Result<Vec<f64>> {
    let flat: Vec<f64> = model.params.iter().flat_map(|p| p.data().iter().copied()).collect();
    let mut probe = model.clone();
    let mut failure = None;
    let grad = numeric_gradient(&flat, eps, |x| {
        let mut offset = 0;
        for p in &mut probe.params {
            let n = p.len();
            p.data_mut().copy_from_slice(&x[offset..offset + n]);
            offset += n;
        }
        match probe.forward(input).and_then(|l| softmax_cross_entropy(&l, labels)) {
            Ok((loss, _)) => loss,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(grad),
    }
}

/// Compares backpropagation against central differences for every
/// parameter of `model`.
pub fn grad_check(model: &Model<f64>, input: &Tensor<f64>, labels: &[usize], eps: f64) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(model, input, labels)?;
    let numeric = numeric_gradients(model, input, labels, eps)?;
    Ok(compare_gradients(&analytic, &numeric))
}

/// A small conv/relu/pool/fc network with a random batch of two inputs,
/// sized so a full finite-difference sweep takes milliseconds.
pub fn tiny_problem(seed: u64) -> (Model<f64>, Tensor<f64>, Vec<usize>) {
    let cfg = ModelConfig {
        input: InputSpec { channels: 1, height: 8, width: 8, crop: Some(7) },
        layers: vec![
            LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 3, stride: 2 },
            LayerSpec::Fc { out_features: 4 },
            LayerSpec::Relu,
            LayerSpec::Fc { out_features: 3 },
        ],
        num_classes: 3,
    };
    let mut model = Model::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in &mut model.params {
        p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let x = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    (model, x, vec![0, 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_passes() {
        for seed in 0..3 {
            let (model, x, labels) = tiny_problem(seed);
            let report = grad_check(&model, &x, &labels, 1e-6).unwrap();
            assert!(report.passes(1e-6), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn negated_gradient_is_caught() {
        let (model, x, labels) = tiny_problem(0);
        let mut analytic = analytic_gradients(&model, &x, &labels).unwrap();
        let numeric = numeric_gradients(&model, &x, &labels, 1e-6).unwrap();
        let start = model.params[0].len();
        let end = start + model.params[1].len();
        analytic[start..end].iter_mut().for_each(|g| *g = -*g);
        let report = compare_gradients(&analytic, &numeric);
        assert!(!report.passes(1e-6));
        assert!(report.max_rel_error > 1.0);
        assert!((start..end).contains(&report.worst_index));
    }

    #[test]
    fn relative_error_rules() {
        assert_eq!(relative_error(0.0, 0.0), None);
        assert_eq!(relative_error(1e-12, -1e-12), None);
        assert_eq!(relative_error(2.0, 1.0), Some(0.5));
        assert_eq!(relative_error(1.0, -1.0), Some(2.0));
        let nan = compare_gradients(&[f64::NAN], &[1.0]);
        assert!(!nan.passes(1e-6));
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(&[1.0, -2.0], 1e-6, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
