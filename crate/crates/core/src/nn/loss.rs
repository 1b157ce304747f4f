use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch, and its gradient with respect to
/// the logits, `(softmax − onehot) / B`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, classes) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape("labels", &[b], &[labels.len()]));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_b = 1.0 / b as f64;
    let mut grad = Tensor::zeros(&[b, classes]);
    let mut total = 0.0;
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(classes)
        .zip(grad.data_mut().chunks_exact_mut(classes))
        .zip(labels)
    {
        let (loss, probs) = softmax_xent_row(row, label);
        total += loss;
        for (gi, p) in g.iter_mut().zip(probs) {
            *gi = p * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

/// Per-example loss and softmax for one row of logits.
pub(crate) fn softmax_xent_row(row: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (row[label] - max);
    (loss, exps.into_iter().map(|e| e / sum).collect())
}
