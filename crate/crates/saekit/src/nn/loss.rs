//! Classification losses, written against raw logits for numerical safety.
//!
//! Cross-entropy goes through log-sum-exp with max subtraction, so no exp of
//! a large positive number is ever taken. Binary cross-entropy uses the
//! standard stable rewrite max(x, 0) - x y + ln(1 + exp(-|x|)). Both losses
//! average: cross-entropy over rows, BCE over every element.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean cross-entropy of row logits against integer labels. Returns the loss
/// and the softmax probabilities (the backward pass needs them anyway).
pub fn cross_entropy<E: Scalar>(logits: &Tensor<E>, labels: &[usize]) -> Result<(E, Tensor<E>)> {
    if logits.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            shape: logits.shape().to_vec(),
            reason: "expected N x classes logits".into(),
        });
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            shape: logits.shape().to_vec(),
            reason: format!("{} labels for {} rows", labels.len(), n),
        });
    }
    let mut probs = vec![E::ZERO; n * c];
    let mut total = E::ZERO;
    for i in 0..n {
        let label = labels[i];
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut mx = row[0];
        for &v in row {
            mx = mx.maximum(v);
        }
        let mut sum = E::ZERO;
        for &v in row {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        total += lse - row[label];
        for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    let loss = total / E::from_f64(n as f64);
    Ok((loss, Tensor::from_raw(vec![n, c], probs)))
}

/// d(mean CE)/d(logits) scaled by an upstream scalar: (p - onehot) / N.
pub fn cross_entropy_backward<E: Scalar>(
    probs: &Tensor<E>,
    labels: &[usize],
    upstream: E,
) -> Tensor<E> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let k = upstream / E::from_f64(n as f64);
    let mut dx = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        dx[i * c + label] -= E::ONE;
    }
    for v in &mut dx {
        *v *= k;
    }
    Tensor::from_raw(vec![n, c], dx)
}

/// Mean binary cross-entropy over all elements, taking logits and hard 0/1
/// targets of the same shape. Returns the loss and the sigmoids.
pub fn bce_with_logits<E: Scalar>(
    logits: &Tensor<E>,
    targets: &Tensor<E>,
) -> Result<(E, Tensor<E>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "bce_with_logits",
            lhs: logits.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let mut sig = vec![E::ZERO; logits.len()];
    let mut total = E::ZERO;
    for (i, (&x, &y)) in logits.data().iter().zip(targets.data()).enumerate() {
        if y != E::ZERO && y != E::ONE {
            return Err(Error::NonBinaryTarget {
                value: y.to_f64(),
                index: i,
            });
        }
        total += x.maximum(E::ZERO) - x * y + (-x.abs()).exp().ln_1p();
        sig[i] = if x >= E::ZERO {
            E::ONE / (E::ONE + (-x).exp())
        } else {
            let e = x.exp();
            e / (E::ONE + e)
        };
    }
    let loss = total / E::from_f64(logits.len() as f64);
    Ok((loss, Tensor::from_raw(logits.shape().to_vec(), sig)))
}

/// d(mean BCE)/d(logits) scaled by an upstream scalar: (sigma(x) - y) / len.
pub fn bce_with_logits_backward<E: Scalar>(
    sig: &Tensor<E>,
    targets: &Tensor<E>,
    upstream: E,
) -> Tensor<E> {
    let k = upstream / E::from_f64(sig.len() as f64);
    let data = sig
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&s, &y)| (s - y) * k)
        .collect();
    Tensor::from_raw(sig.shape().to_vec(), data)
}
