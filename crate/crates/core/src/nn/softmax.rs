use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-location two-way softmax probabilities, mean cross-entropy and its
/// gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct XentOutput<T> {
    pub probabilities: Tensor<T>,
    pub loss: f64,
    pub grad: Tensor<T>,
}

fn locations<T: Real>(logits: &Tensor<T>) -> Result<usize> {
    match logits.shape().last() {
        Some(2) => Ok(logits.len() / 2),
        _ => Err(Error::shape(format!(
            "two-way softmax needs a trailing dimension of 2, got {:?}",
            logits.shape()
        ))),
    }
}

/// Normalizes each trailing logit pair into probabilities, stabilized by
/// subtracting the pair's maximum.
pub fn softmax2<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    locations(logits)?;
    let mut out = Vec::with_capacity(logits.len());
    for z in logits.data().chunks_exact(2) {
        let m = z[0].max(z[1]);
        let (e0, e1) = ((z[0] - m).exp(), (z[1] - m).exp());
        let s = e0 + e1;
        out.push(e0 / s);
        out.push(e1 / s);
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Softmax plus cross-entropy averaged over every location in `logits`.
pub fn softmax2_xent<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<XentOutput<T>> {
    let n = locations(logits)?;
    softmax2_xent_scaled(logits, labels, n)
}

/// As [`softmax2_xent`], but the loss and gradient are divided by `denom`
/// instead of this tensor's location count, so several samples can share one
/// mini-batch mean.
pub fn softmax2_xent_scaled<T: Real>(logits: &Tensor<T>, labels: &[u8], denom: usize) -> Result<XentOutput<T>> {
    let n = locations(logits)?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} softmax locations",
            labels.len()
        )));
    }
    if denom == 0 {
        return Err(Error::invalid("cross-entropy normalizer must be positive"));
    }
    let scale = 1.0 / denom as f64;
    let mut probs = Vec::with_capacity(2 * n);
    let mut grad = Vec::with_capacity(2 * n);
    let mut loss = 0.0f64;
    for (z, &label) in logits.data().chunks_exact(2).zip(labels) {
        if label > 1 {
            return Err(Error::invalid(format!("class label {label} is not 0 or 1")));
        }
        let (z0, z1) = (z[0].as_f64(), z[1].as_f64());
        let m = z0.max(z1);
        let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
        let s = e0 + e1;
        let p = [e0 / s, e1 / s];
        let zl = if label == 0 { z0 } else { z1 };
        loss += -((zl - m) - s.ln());
        for (class, &pc) in p.iter().enumerate() {
            let target = if class == label as usize { 1.0 } else { 0.0 };
            probs.push(T::lit(pc));
            grad.push(T::lit((pc - target) * scale));
        }
    }
    Ok(XentOutput {
        probabilities: Tensor::from_vec(logits.shape(), probs)?,
        loss: loss * scale,
        grad: Tensor::from_vec(logits.shape(), grad)?,
    })
}
