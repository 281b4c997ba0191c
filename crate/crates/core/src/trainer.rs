//! Initialization schemes, SGD updates and the epoch loop with an optional
//! one-shot teleportation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cob::{sample_cob, CobSamplingSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{
    accuracy, backward, forward, loss, BatchNormMode, GradientSet, Layer, LossKind, Network, Target,
    BATCHNORM_MOMENTUM,
};
use crate::rng;
use crate::teleport::{pseudo_teleport, teleport_in_place};
use crate::tensor::Tensor;

pub const MOMENTUM: f64 = 0.9;
/// Samples per forward pass when evaluating a whole dataset.
pub const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// `N(0, 2 / fan_in)`
    Kaiming,
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`
    Xavier,
    /// `U(-a, a)` with `a = 1 / sqrt(fan_in)`
    Uniform,
    /// `N(0, 0.01^2)`
    Gaussian,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Kaiming => "kaiming",
            InitScheme::Xavier => "xavier",
            InitScheme::Uniform => "uniform",
            InitScheme::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [InitScheme::Kaiming, InitScheme::Xavier, InitScheme::Uniform, InitScheme::Gaussian]
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown init scheme '{s}'")))
    }
}

/// Fresh weights drawn from `scheme`; biases zero, batch-norm at
/// gamma = 1, beta = 0, activation scales reset to 1.
pub fn initialize(net: &Network, scheme: InitScheme, seed: u64) -> Network {
    let mut rng = rng::stream(seed, rng::STREAM_INIT);
    let mut out = net.clone();
    for layer in out.layers_mut() {
        let (weights, bias, fan_in, fan_out) = match layer {
            Layer::Dense(d) => {
                let (i, o) = (d.inputs(), d.outputs());
                (d.weight.data_mut(), d.bias.as_mut(), i, o)
            }
            Layer::Conv2d(c) => {
                let s = c.kernel.shape().to_vec();
                let taps = s[2] * s[3];
                (c.kernel.data_mut(), c.bias.as_mut(), s[1] * taps, s[0] * taps)
            }
            Layer::BatchNorm(bn) => {
                bn.gamma.iter_mut().for_each(|g| *g = 1.0);
                bn.beta.iter_mut().for_each(|b| *b = 0.0);
                continue;
            }
            Layer::Activation(a) => {
                a.scales.iter_mut().for_each(|s| *s = 1.0);
                continue;
            }
            _ => continue,
        };
        let (fi, fo) = (fan_in as f64, fan_out as f64);
        match scheme {
            InitScheme::Kaiming | InitScheme::Gaussian => {
                let std = if scheme == InitScheme::Kaiming { (2.0 / fi).sqrt() } else { 0.01 };
                let dist = Normal::new(0.0, std).expect("positive std");
                weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
            }
            InitScheme::Xavier | InitScheme::Uniform => {
                let a = if scheme == InitScheme::Xavier { (6.0 / (fi + fo)).sqrt() } else { 1.0 / fi.sqrt() };
                weights.iter_mut().for_each(|w| *w = rng.gen_range(-a..=a));
            }
        }
        if let Some(b) = bias {
            b.iter_mut().for_each(|b| *b = 0.0);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball momentum with coefficient [`MOMENTUM`].
    Momentum,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "sgd-momentum" | "momentum" => Ok(Optimizer::Momentum),
            _ => Err(Error::InvalidArgument(format!("unknown optimizer '{s}' (sgd, sgd-momentum)"))),
        }
    }
}

/// `w <- w - lr * g`, or with a momentum buffer `m <- 0.9 m + g`,
/// `w <- w - lr * m`.
pub fn sgd_step(net: &mut Network, grads: &GradientSet, lr: f64, momentum: Option<&mut Vec<f64>>) -> Result<()> {
    let g = grads.flatten();
    let mut w = net.parameters();
    if g.len() != w.len() {
        return Err(Error::shape("sgd_step", &[w.len()], &[g.len()]));
    }
    match momentum {
        None => w.iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * g),
        Some(m) => {
            if m.len() != w.len() {
                if !m.is_empty() {
                    return Err(Error::shape("sgd_step momentum", &[w.len()], &[m.len()]));
                }
                m.resize(w.len(), 0.0);
            }
            for ((w, m), g) in w.iter_mut().zip(m.iter_mut()).zip(&g) {
                *m = MOMENTUM * *m + g;
                *w -= lr * *m;
            }
        }
    }
    net.set_parameters(&w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeleportMode {
    /// Function-preserving teleportation.
    Teleport,
    /// Random displacement of the same norm.
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeleportTiming {
    /// After initialization, before the first batch.
    AtInit,
    /// After this many completed epochs.
    AtEpoch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeleportEvent {
    pub timing: TeleportTiming,
    pub spec: CobSamplingSpec,
    pub mode: TeleportMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` trains the network's current parameters.
    pub init_scheme: Option<InitScheme>,
    pub teleport: Option<TeleportEvent>,
    pub loss: LossKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate,
            epochs,
            batch_size,
            init_scheme: Some(InitScheme::Kaiming),
            teleport: None,
            loss: LossKind::CrossEntropy,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if let Some(TeleportEvent { timing: TeleportTiming::AtEpoch(e), .. }) = self.teleport {
            if e >= self.epochs {
                return Err(Error::InvalidArgument(format!(
                    "teleport epoch {e} must be below the epoch count {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// `||dW|| / ||W||` on the last batch of the epoch.
    pub grad_norm_normalized: f64,
    pub teleported: bool,
}

/// Measurements taken around the teleport event.
#[derive(Debug, Clone, PartialEq)]
pub struct TeleportRecord {
    /// Completed epochs at the time of the event.
    pub after_epoch: usize,
    pub val_loss_before: f64,
    pub val_loss_after: f64,
    /// `||dW||` on the next training batch, before and after.
    pub grad_norm_before: f64,
    pub grad_norm_after: f64,
    /// Same batch, divided by the parameter norm.
    pub normalized_grad_before: f64,
    pub normalized_grad_after: f64,
    pub weight_l1_mean_diff: f64,
    pub displacement_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: Network,
    pub epochs: Vec<EpochRecord>,
    pub teleport: Option<TeleportRecord>,
}

/// Mean loss and accuracy over a dataset, evaluated in chunks. The network
/// is used as given (batch-norm mode included).
pub fn evaluate(net: &Network, data: &Dataset, kind: LossKind) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let (mut total_loss, mut correct) = (0.0, 0.0);
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let (x, y) = data.slice(start, end);
        let out = forward(net, &x)?.into_output();
        let n = (end - start) as f64;
        correct += accuracy(&out, &y)? * n;
        total_loss += loss(&out, &Target::Labels(y), kind)? * n;
        start = end;
    }
    let n = data.len() as f64;
    Ok((total_loss / n, correct / n))
}

fn eval_mode(net: &Network) -> Network {
    let mut n = net.clone();
    n.set_batchnorm_mode(BatchNormMode::Eval);
    n
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(||dW||, ||dW|| / ||W||)` for one batch with batch-norm in train mode.
pub fn batch_grad_norms(net: &Network, x: &Tensor, labels: &[usize], kind: LossKind) -> Result<(f64, f64)> {
    let cache = forward(net, x)?;
    let g = backward(net, &cache, &Target::Labels(labels.to_vec()), kind)?.norm();
    Ok((g, g / norm(&net.parameters())))
}

fn apply_event(
    net: &mut Network,
    event: &TeleportEvent,
    completed: usize,
    probe: (&Tensor, &[usize]),
    val: &Dataset,
    kind: LossKind,
) -> Result<TeleportRecord> {
    let val_loss_before = evaluate(&eval_mode(net), val, kind)?.0;
    let (grad_norm_before, normalized_grad_before) = batch_grad_norms(net, probe.0, probe.1, kind)?;
    let before = net.parameters();
    let cob = sample_cob(net, &event.spec)?;
    match event.mode {
        TeleportMode::Teleport => teleport_in_place(net, &cob)?,
        TeleportMode::Pseudo => *net = pseudo_teleport(net, &cob, event.spec.seed)?,
    }
    let diff: Vec<f64> = net.parameters().iter().zip(&before).map(|(v, w)| v - w).collect();
    let (grad_norm_after, normalized_grad_after) = batch_grad_norms(net, probe.0, probe.1, kind)?;
    Ok(TeleportRecord {
        after_epoch: completed,
        val_loss_before,
        val_loss_after: evaluate(&eval_mode(net), val, kind)?.0,
        grad_norm_before,
        grad_norm_after,
        normalized_grad_before,
        normalized_grad_after,
        weight_l1_mean_diff: diff.iter().map(|d| d.abs()).sum::<f64>() / diff.len().max(1) as f64,
        displacement_norm: norm(&diff),
    })
}

/// Train with shuffled mini-batches. Batch-norm runs in train mode while
/// fitting and in eval mode for validation.
pub fn train(net: &Network, train_set: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.check()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if train_set.sample_shape() != net.input_shape() {
        return Err(Error::shape("train data", train_set.sample_shape(), net.input_shape()));
    }
    let mut net = match config.init_scheme {
        Some(s) => initialize(net, s, config.seed),
        None => net.clone(),
    };
    net.set_batchnorm_mode(BatchNormMode::Train);
    let mut shuffle_rng = rng::stream(config.seed, rng::STREAM_SHUFFLE);
    let mut momentum: Option<Vec<f64>> = (config.optimizer == Optimizer::Momentum).then(Vec::new);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut teleport_record = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let due = match config.teleport {
            Some(e) => match e.timing {
                TeleportTiming::AtInit => epoch == 0,
                TeleportTiming::AtEpoch(at) => epoch == at,
            },
            None => false,
        };
        if due {
            let event = config.teleport.expect("due implies an event");
            let first = &order[..config.batch_size.min(order.len())];
            let (x, y) = train_set.batch(first);
            teleport_record = Some(apply_event(&mut net, &event, epoch, (&x, &y), val, config.loss)?);
            // Momentum lives in the old coordinates.
            if let Some(m) = momentum.as_mut() {
                m.clear();
            }
        }
        let (mut loss_sum, mut last_ratio) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = train_set.batch(chunk);
            let cache = forward(&net, &x)?;
            let grads = backward(&net, &cache, &Target::Labels(y), config.loss)?;
            loss_sum += grads.loss.expect("set by backward") * chunk.len() as f64;
            last_ratio = grads.norm() / norm(&net.parameters());
            if net.has_batchnorm() {
                net.update_running_stats(&cache, BATCHNORM_MOMENTUM);
            }
            sgd_step(&mut net, &grads, config.learning_rate, momentum.as_mut())?;
        }
        let (val_loss, val_accuracy) = evaluate(&eval_mode(&net), val, config.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_accuracy,
            grad_norm_normalized: last_ratio,
            teleported: due,
        });
    }
    Ok(TrainOutcome {
        network: net,
        epochs: records,
        teleport: teleport_record,
    })
}
