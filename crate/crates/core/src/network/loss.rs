use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy on raw logits.
    CrossEntropy,
    /// `0.5 * ||y - t||^2` per sample.
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            _ => Err(Error::InvalidArgument(format!("unknown loss '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// One class index per sample.
    Labels(Vec<usize>),
    /// Dense targets with the output's shape.
    Values(Tensor),
}

fn output_dims(output: &Tensor) -> Result<(usize, usize)> {
    match output.shape() {
        &[b, k] => Ok((b, k)),
        s => Err(Error::InvalidArgument(format!(
            "loss expects a [batch, outputs] tensor, got {s:?}"
        ))),
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape("loss labels", &[batch], &[labels.len()]));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean loss over the batch.
pub fn loss(output: &Tensor, target: &Target, kind: LossKind) -> Result<f64> {
    loss_impl(output, target, kind, false).map(|(l, _)| l)
}

/// Mean loss and its gradient with respect to `output`.
pub fn loss_with_gradient(output: &Tensor, target: &Target, kind: LossKind) -> Result<(f64, Tensor)> {
    loss_impl(output, target, kind, true).map(|(l, g)| (l, g.expect("requested")))
}

fn loss_impl(output: &Tensor, target: &Target, kind: LossKind, grad: bool) -> Result<(f64, Option<Tensor>)> {
    let (batch, k) = output_dims(output)?;
    let z = output.data();
    let mut total = 0.0;
    let mut g = grad.then(|| vec![0.0; z.len()]);
    let inv_b = 1.0 / batch as f64;
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Labels(labels)) => {
            check_labels(labels, batch, k)?;
            for (b, &label) in labels.iter().enumerate() {
                let row = &z[b * k..(b + 1) * k];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum_exp.ln();
                total += lse - row[label];
                if let Some(g) = g.as_mut() {
                    for j in 0..k {
                        let p = (row[j] - lse).exp();
                        g[b * k + j] = (p - if j == label { 1.0 } else { 0.0 }) * inv_b;
                    }
                }
            }
        }
        (LossKind::CrossEntropy, Target::Values(_)) => {
            return Err(Error::InvalidArgument(
                "cross-entropy needs class labels".into(),
            ))
        }
        (LossKind::Mse, target) => {
            let values: Vec<f64> = match target {
                Target::Values(t) => {
                    if t.shape() != output.shape() {
                        return Err(Error::shape("mse target", output.shape(), t.shape()));
                    }
                    t.data().to_vec()
                }
                Target::Labels(labels) => {
                    check_labels(labels, batch, k)?;
                    let mut v = vec![0.0; batch * k];
                    for (b, &l) in labels.iter().enumerate() {
                        v[b * k + l] = 1.0;
                    }
                    v
                }
            };
            for (i, (y, t)) in z.iter().zip(&values).enumerate() {
                let d = y - t;
                total += 0.5 * d * d;
                if let Some(g) = g.as_mut() {
                    g[i] = d * inv_b;
                }
            }
        }
    }
    let grad_tensor = match g {
        Some(g) => Some(Tensor::new(output.shape().to_vec(), g)?),
        None => None,
    };
    Ok((total * inv_b, grad_tensor))
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy(output: &Tensor, labels: &[usize]) -> Result<f64> {
    let (batch, k) = output_dims(output)?;
    check_labels(labels, batch, k)?;
    let z = output.data();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(b, &l)| {
            let row = &z[b * k..(b + 1) * k];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            best == l
        })
        .count();
    Ok(correct as f64 / batch as f64)
}
