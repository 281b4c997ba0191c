use std::fmt;

use rand::seq::index;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{backward, forward, LossKind, Network, Target};
use crate::rng;
use crate::teleport::micro_teleport;

/// Angle in degrees between two non-zero vectors.
pub fn angle_between(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("angle_between", &[u.len()], &[v.len()]));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("angle with a zero vector is undefined".into()));
    }
    // 2 atan2(|u/|u| - v/|v||, |u/|u| + v/|v||) stays accurate near 0 and 180.
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a / nu, b / nv);
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    Ok((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairKind {
    MicroVsGrad,
    MicroVsRandom,
    GradVsRandom,
    RandomVsRandom,
}

impl PairKind {
    pub const ALL: [PairKind; 4] = [
        PairKind::MicroVsGrad,
        PairKind::MicroVsRandom,
        PairKind::GradVsRandom,
        PairKind::RandomVsRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PairKind::MicroVsGrad => "micro-vs-grad",
            PairKind::MicroVsRandom => "micro-vs-random",
            PairKind::GradVsRandom => "grad-vs-random",
            PairKind::RandomVsRandom => "random-vs-random",
        }
    }
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleSample {
    pub pair_kind: PairKind,
    pub angle_degrees: f64,
    pub batch_size: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroAngleConfig {
    pub batch_sizes: Vec<usize>,
    pub sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Coefficient of an optional `l2 * ||W||^2` penalty added to the loss.
    pub l2: f64,
    pub loss: LossKind,
}

impl MicroAngleConfig {
    pub fn new(batch_sizes: Vec<usize>, sigma: f64, n_samples: usize, seed: u64) -> Self {
        MicroAngleConfig {
            batch_sizes,
            sigma,
            n_samples,
            seed,
            l2: 0.0,
            loss: LossKind::CrossEntropy,
        }
    }
}

fn one_cell(net: &Network, data: &Dataset, cfg: &MicroAngleConfig, batch: usize, seed: u64) -> Result<[AngleSample; 4]> {
    let mut rng = rng::stream(seed, rng::STREAM_ANGLES);
    let picks = index::sample(&mut rng, data.len(), batch).into_vec();
    let (x, y) = data.batch(&picks);
    let grads = backward(net, &forward(net, &x)?, &Target::Labels(y), cfg.loss)?;
    let mut g = grads.flatten();
    if cfg.l2 != 0.0 {
        for (g, w) in g.iter_mut().zip(net.parameters()) {
            *g += 2.0 * cfg.l2 * w;
        }
    }
    let (_, micro) = micro_teleport(net, cfg.sigma, seed)?;
    let r1 = rng::unit_direction(&mut rng, g.len());
    let r2 = rng::unit_direction(&mut rng, g.len());
    let angles = [
        angle_between(&micro, &g)?,
        angle_between(&micro, &r1)?,
        angle_between(&g, &r1)?,
        angle_between(&r1, &r2)?,
    ];
    Ok(PairKind::ALL.map(|k| AngleSample {
        pair_kind: k,
        angle_degrees: angles[k as usize],
        batch_size: batch,
        sigma: cfg.sigma,
    }))
}

/// For every batch size and sample: gradient at `net` on a random batch,
/// one micro-teleportation displacement and two isotropic random
/// directions, compared pairwise. Output order is deterministic.
pub fn micro_angle_experiment(net: &Network, data: &Dataset, cfg: &MicroAngleConfig) -> Result<Vec<AngleSample>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("angle experiment needs a non-empty dataset".into()));
    }
    if let Some(&b) = cfg.batch_sizes.iter().find(|&&b| b == 0 || b > data.len()) {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} not in 1..={}",
            data.len()
        )));
    }
    let cells: Vec<(usize, u64)> = cfg
        .batch_sizes
        .iter()
        .enumerate()
        .flat_map(|(bi, &b)| {
            (0..cfg.n_samples).map(move |s| (b, rng::child_seed(cfg.seed, (bi * cfg.n_samples + s) as u64)))
        })
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(b, seed)| one_cell(net, data, cfg, b, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}
