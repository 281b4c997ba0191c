//! Teleportation: `v = (t_out / t_in) * w` on every weight and
//! `g(x) = t * f(x / t)` on every activation.

use crate::cob::{check_cob, sample_cob, ChangeOfBasis, CobKind, CobSamplingSpec};
use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TeleportReport {
    /// Mean of `|v - w|` over all trainable parameters.
    pub weight_l1_mean_diff: f64,
    /// Mean of `|w|` over all trainable parameters of the original network.
    pub weight_l1_mean_magnitude: f64,
    /// `vec(V) - vec(W)` in [`Network::parameters`] order.
    pub displacement: Vec<f64>,
}

impl TeleportReport {
    fn between(before: &[f64], after: &[f64]) -> Self {
        let n = before.len().max(1) as f64;
        let displacement: Vec<f64> = after.iter().zip(before).map(|(v, w)| v - w).collect();
        TeleportReport {
            weight_l1_mean_diff: displacement.iter().map(|d| d.abs()).sum::<f64>() / n,
            weight_l1_mean_magnitude: before.iter().map(|w| w.abs()).sum::<f64>() / n,
            displacement,
        }
    }

    pub fn displacement_norm(&self) -> f64 {
        self.displacement.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

/// Teleported copy of `net`; `net` itself is left alone.
pub fn teleport(net: &Network, cob: &ChangeOfBasis) -> Result<(Network, TeleportReport)> {
    let mut out = net.clone();
    teleport_in_place(&mut out, cob)?;
    let report = TeleportReport::between(&net.parameters(), &out.parameters());
    Ok((out, report))
}

pub fn teleport_in_place(net: &mut Network, cob: &ChangeOfBasis) -> Result<()> {
    check_cob(net, cob)?;
    for k in 0..net.layers().len() {
        let (t_in, t_out) = (cob.node(k), cob.node(k + 1));
        match &mut net.layers_mut()[k] {
            Layer::Dense(d) => {
                let inv_in: Vec<f64> = t_in.iter().map(|t| 1.0 / t).collect();
                d.weight = d.weight.bullet_scale(Some(t_out), Some(&inv_in))?;
                if let Some(b) = d.bias.as_mut() {
                    b.iter_mut().zip(t_out).for_each(|(b, t)| *b *= t);
                }
            }
            Layer::Conv2d(c) => {
                let shape = c.kernel.shape().to_vec();
                let taps = shape[2] * shape[3];
                let mut data = c.kernel.data().to_vec();
                for (o, t_o) in t_out.iter().enumerate() {
                    for (i, t_i) in t_in.iter().enumerate() {
                        let ratio = t_o / t_i;
                        let start = (o * shape[1] + i) * taps;
                        data[start..start + taps].iter_mut().for_each(|w| *w *= ratio);
                    }
                }
                c.kernel = Tensor::new(shape, data)?;
                if let Some(b) = c.bias.as_mut() {
                    b.iter_mut().zip(t_out).for_each(|(b, t)| *b *= t);
                }
            }
            Layer::BatchNorm(bn) => {
                // Input CoB is 1, so mean and variance are untouched.
                bn.gamma.iter_mut().zip(t_out).for_each(|(g, t)| *g *= t);
                bn.beta.iter_mut().zip(t_out).for_each(|(b, t)| *b *= t);
            }
            Layer::Activation(a) => {
                a.scales.iter_mut().zip(t_out).for_each(|(s, t)| *s *= t);
            }
            Layer::Flatten | Layer::ResidualAdd { .. } | Layer::Concat { .. } => {}
        }
    }
    Ok(())
}

/// Sample an intra-landscape CoB with range `sigma` (at most 0.01) and
/// teleport. Returns the teleported network and `vec(V) - vec(W)`.
pub fn micro_teleport(net: &Network, sigma: f64, seed: u64) -> Result<(Network, Vec<f64>)> {
    if !(sigma > 0.0 && sigma <= 0.01) {
        return Err(Error::InvalidArgument(format!(
            "micro-teleportation range must lie in (0, 0.01], got {sigma}"
        )));
    }
    let cob = sample_cob(net, &CobSamplingSpec::new(CobKind::Micro, sigma, seed)?)?;
    let (v, report) = teleport(net, &cob)?;
    Ok((v, report.displacement))
}

/// Move the parameters a distance `||vec(T(W)) - vec(W)||` in a uniformly
/// random direction. Activation scales are left as they are, so the network
/// function is generally not preserved.
pub fn pseudo_teleport(net: &Network, cob: &ChangeOfBasis, seed: u64) -> Result<Network> {
    let (_, report) = teleport(net, cob)?;
    let radius = report.displacement_norm();
    let mut params = net.parameters();
    let mut rng = rng::stream(seed, rng::STREAM_PSEUDO);
    let dir = rng::unit_direction(&mut rng, params.len());
    params.iter_mut().zip(&dir).for_each(|(w, u)| *w += radius * u);
    let mut out = net.clone();
    out.set_parameters(&params)?;
    Ok(out)
}
