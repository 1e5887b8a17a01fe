use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = match logits.shape() {
        &[n, c] if c > 0 => (n, c),
        s => return Err(Error::Shape(format!("logits must be N×C, got {s:?}"))),
    };
    let mut out = Vec::with_capacity(n * c);
    for row in logits.data().chunks(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::from_vec(&[n, c], out)
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let probs = softmax(logits)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        // log-sum-exp form keeps the loss finite when p[label] underflows
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss = loss + (lse - row[label]);
        grad.data_mut()[i * c + label] = grad.data()[i * c + label] - T::one();
    }
    grad.data_mut().iter_mut().for_each(|g| *g = *g * inv_n);
    Ok((loss * inv_n, grad))
}
