//! Softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean cross-entropy over the batch plus the gradient w.r.t. the logits.
///
/// Softmax is computed with max-subtraction; the returned gradient is
/// (softmax − onehot) / batch_size.
pub fn cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[u16]) -> Result<(E, Tensor<E>)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy expects (batch, classes) logits, got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    for &l in labels {
        if (l as usize) >= c {
            return Err(Error::Data(format!("label {l} out of range for {c} classes")));
        }
    }

    let inv_n = E::from_f64(1.0 / n as f64);
    let mut grad = Tensor::zeros(&[n, c]);
    let mut loss = E::zero();
    for (i, (row, grow)) in logits
        .data()
        .chunks(c)
        .zip(grad.data_mut().chunks_mut(c))
        .enumerate()
    {
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut denom = E::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let label = labels[i] as usize;
        loss += denom.ln() - (row[label] - max);
        let inv_denom = denom.recip();
        for (j, (g, &v)) in grow.iter_mut().zip(row).enumerate() {
            let p = (v - max).exp() * inv_denom;
            *g = (p - if j == label { E::one() } else { E::zero() }) * inv_n;
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross_entropy produced non-finite loss".into()));
    }
    Ok((loss, grad))
}
