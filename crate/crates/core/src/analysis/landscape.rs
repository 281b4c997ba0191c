use rayon::prelude::*;

use crate::cob::{sample_cob, ChangeOfBasis, CobSamplingSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{BatchNormMode, Layer, LossKind, Network};
use crate::rng;
use crate::teleport::teleport;
use crate::trainer::evaluate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelCurveRow {
    pub teleport_index: usize,
    pub weight_l1_diff: f64,
    pub loss_diff: f64,
}

fn level_row(net: &Network, data: &Dataset, cob: &ChangeOfBasis, index: usize, base: f64, kind: LossKind) -> Result<LevelCurveRow> {
    let (v, report) = teleport(net, cob)?;
    let l = evaluate(&v, data, kind)?.0;
    Ok(LevelCurveRow {
        teleport_index: index,
        weight_l1_diff: report.weight_l1_mean_diff,
        loss_diff: (l - base).abs(),
    })
}

/// Teleport `n_teleports` times with independently drawn CoBs and compare
/// the dataset loss before and after each teleport.
pub fn level_curve_probe(
    net: &Network,
    data: &Dataset,
    n_teleports: usize,
    spec: &CobSamplingSpec,
    kind: LossKind,
) -> Result<Vec<LevelCurveRow>> {
    let base = evaluate(net, data, kind)?.0;
    (0..n_teleports)
        .into_par_iter()
        .map(|i| {
            let cob = sample_cob(net, &spec.with_seed(rng::child_seed(spec.seed, i as u64)))?;
            level_row(net, data, &cob, i, base, kind)
        })
        .collect()
}

/// Level-curve row for one explicit CoB (used for the identity baseline).
pub fn level_curve_row(net: &Network, data: &Dataset, cob: &ChangeOfBasis, kind: LossKind) -> Result<LevelCurveRow> {
    let base = evaluate(net, data, kind)?.0;
    level_row(net, data, cob, 0, base, kind)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationPoint {
    pub alpha: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

fn same_activations(a: &Network, b: &Network) -> bool {
    a.layers().iter().zip(b.layers()).all(|pair| match pair {
        (Layer::Activation(x), Layer::Activation(y)) => x == y,
        _ => true,
    })
}

/// Evaluate `(1 - alpha) W_a + alpha W_b` for `steps` evenly spaced alphas
/// in `[0, 1]`. Batch-norm layers are evaluated with running statistics.
pub fn interpolate_networks(
    a: &Network,
    b: &Network,
    steps: usize,
    train: &Dataset,
    val: &Dataset,
    kind: LossKind,
) -> Result<Vec<InterpolationPoint>> {
    if !a.same_architecture(b) {
        return Err(Error::Architecture("interpolation endpoints differ in architecture".into()));
    }
    if !same_activations(a, b) {
        return Err(Error::Architecture(
            "interpolation endpoints carry different activation scales".into(),
        ));
    }
    if steps < 2 {
        return Err(Error::InvalidArgument("interpolation needs at least two steps".into()));
    }
    let (wa, wb) = (a.parameters(), b.parameters());
    (0..steps)
        .into_par_iter()
        .map(|i| {
            let alpha = i as f64 / (steps - 1) as f64;
            let mut net = if i == 0 {
                a.clone()
            } else if i == steps - 1 {
                b.clone()
            } else {
                let mut n = a.clone();
                let w: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
                n.set_parameters(&w)?;
                n
            };
            net.set_batchnorm_mode(BatchNormMode::Eval);
            let (train_loss, train_acc) = evaluate(&net, train, kind)?;
            let (val_loss, val_acc) = evaluate(&net, val, kind)?;
            Ok(InterpolationPoint {
                alpha,
                train_loss,
                val_loss,
                train_acc,
                val_acc,
            })
        })
        .collect()
}

/// Largest central second difference of evenly spaced samples on `[0, 1]`,
/// `(L[i-1] - 2 L[i] + L[i+1]) / h^2`.
pub fn curvature_proxy(values: &[f64]) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::InvalidArgument("curvature needs at least three points".into()));
    }
    let h = 1.0 / (values.len() - 1) as f64;
    Ok(values
        .windows(3)
        .map(|w| (w[0] - 2.0 * w[1] + w[2]) / (h * h))
        .fold(f64::NEG_INFINITY, f64::max))
}
