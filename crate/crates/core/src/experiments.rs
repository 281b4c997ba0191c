//! Config-driven experiment runs that write CSV tables.
//!
//! Every table starts with a fixed header and formats floats with Rust's
//! shortest round-trip representation, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::analysis::{
    interpolate_networks, level_curve_probe, micro_angle_experiment, normalized_gradient_gap, LevelCurveRow,
    MicroAngleConfig,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cob::{sample_cob, CobKind, CobSamplingSpec};
use crate::config::{DatasetKind, ExperimentConfig, ExperimentKind};
use crate::data::{load_cifar10, load_mnist, make_random_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{extract_feature_maps, BatchNormMode, LossKind, Network, Preset, Target};
use crate::rng;
use crate::teleport::teleport;
use crate::trainer::{
    initialize, train, InitScheme, Optimizer, TeleportEvent, TeleportMode, TeleportTiming, TrainConfig,
};

pub const ANGLES_HEADER: &str = "pair_kind,batch_size,sigma,angle_deg";
pub const LEVEL_CURVE_HEADER: &str = "teleport_index,weight_l1_diff,loss_diff";
pub const GRAD_SCALE_HEADER: &str = "sigma,run,normalized_gap";
pub const INTERPOLATION_HEADER: &str = "alpha,train_loss,val_loss,train_acc,val_acc";
pub const TRAINING_HEADER: &str = "epoch,train_loss,val_loss,val_acc,grad_norm_normalized,teleported";
pub const FEATURE_MAPS_HEADER: &str = "network,layer,neuron,value";

/// Loss differences above this fail a `verify` run.
pub const VERIFY_TOLERANCE: f64 = 1e-8;

pub const RANDOM_TRAIN_SIZE: usize = 2048;
pub const RANDOM_VAL_SIZE: usize = 512;
pub const DEFAULT_TRAIN_SUBSET: usize = 5000;
pub const DEFAULT_VAL_SUBSET: usize = 1000;
/// Subsets of real datasets are drawn with this seed so that runs with
/// different training seeds see the same samples.
pub const DATA_SEED: u64 = 0;

pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_BATCH: usize = 64;

/// Files written by a run plus a short human-readable summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

/// `{:?}` on `f64` is the shortest string that parses back to the same bits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}

fn write_table(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = String::with_capacity(4096);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
}

fn random_input_shape(model: Preset) -> Vec<usize> {
    match model {
        Preset::Mlp | Preset::MlpSmall => vec![784],
        Preset::SmallConvNet | Preset::SmallResNet => vec![1, 28, 28],
    }
}

fn missing_dataset(name: &str, dir: &Path, e: Error) -> Error {
    Error::Config(format!(
        "dataset '{name}' could not be loaded from {} ({e}); point TELEPORT_LAB_DATA at the data root",
        dir.display()
    ))
}

pub fn load_datasets(cfg: &ExperimentConfig, data_root: &Path) -> Result<Datasets> {
    let seed: u64 = cfg.get_or("seed", 0)?;
    let subset: Option<usize> = cfg.get("subset_size")?;
    match cfg.dataset {
        DatasetKind::Random => {
            let shape = random_input_shape(cfg.model);
            let n = subset.unwrap_or(RANDOM_TRAIN_SIZE);
            Ok(Datasets {
                train: make_random_dataset(n, &shape, 10, rng::child_seed(seed, 0))?,
                val: make_random_dataset(RANDOM_VAL_SIZE, &shape, 10, rng::child_seed(seed, 1))?,
            })
        }
        DatasetKind::Mnist => {
            let dir = data_root.join("mnist");
            let load = |split, n| load_mnist(&dir, split, Some(n), DATA_SEED).map_err(|e| missing_dataset("mnist", &dir, e));
            Ok(Datasets {
                train: load(Split::Train, subset.unwrap_or(DEFAULT_TRAIN_SUBSET))?,
                val: load(Split::Test, DEFAULT_VAL_SUBSET)?,
            })
        }
        DatasetKind::Cifar10 => {
            let dir = ["cifar10", "cifar-10-batches-bin"]
                .iter()
                .map(|d| data_root.join(d))
                .find(|d| d.is_dir())
                .unwrap_or_else(|| data_root.join("cifar10"));
            let load = |split, n| load_cifar10(&dir, split, Some(n), DATA_SEED).map_err(|e| missing_dataset("cifar10", &dir, e));
            Ok(Datasets {
                train: load(Split::Train, subset.unwrap_or(DEFAULT_TRAIN_SUBSET))?,
                val: load(Split::Test, DEFAULT_VAL_SUBSET)?,
            })
        }
    }
}

fn build_network(cfg: &ExperimentConfig, data: &Dataset) -> Result<Network> {
    let seed: u64 = cfg.get_or("seed", 0)?;
    let scheme: InitScheme = cfg.get_or("init", InitScheme::Kaiming)?;
    Ok(initialize(&cfg.model.build(data.sample_shape(), data.classes())?, scheme, seed))
}

fn train_config(cfg: &ExperimentConfig, batch_size: usize) -> Result<TrainConfig> {
    let mut tc = TrainConfig::new(
        cfg.get_or("lr", DEFAULT_LR)?,
        cfg.require("epochs")?,
        batch_size,
        cfg.get_or("seed", 0)?,
    );
    tc.optimizer = cfg.get_or("optimizer", Optimizer::Sgd)?;
    tc.init_scheme = Some(cfg.get_or("init", InitScheme::Kaiming)?);
    Ok(tc)
}

/// Optionally train for `epochs` (default 0), leaving the network in
/// batch-norm eval mode.
fn prepared_network(cfg: &ExperimentConfig, data: &Datasets) -> Result<Network> {
    let epochs: usize = cfg.get_or("epochs", 0)?;
    let mut net = if epochs > 0 {
        let tc = train_config(cfg, cfg.get_or("batch_size", DEFAULT_BATCH)?)?;
        train(&build_network(cfg, &data.train)?, &data.train, &data.val, &tc)?.network
    } else {
        build_network(cfg, &data.train)?
    };
    net.set_batchnorm_mode(BatchNormMode::Eval);
    Ok(net)
}

fn level_curve_rows(rows: &[LevelCurveRow]) -> impl Iterator<Item = String> + '_ {
    rows.iter().map(|r| {
        format!(
            "{},{},{}",
            r.teleport_index,
            fmt_float(r.weight_l1_diff),
            fmt_float(r.loss_diff)
        )
    })
}

fn level_curve(
    cfg: &ExperimentConfig,
    net: &Network,
    data: &Dataset,
    out_dir: Option<&Path>,
    strict: bool,
) -> Result<RunSummary> {
    let spec = CobSamplingSpec::new(
        cfg.get_or("cob_kind", CobKind::Inter)?,
        cfg.get_or("sigma", 0.9)?,
        cfg.get_or("seed", 0)?,
    )?;
    let n: usize = cfg.get_or("n_teleports", 100)?;
    let rows = level_curve_probe(net, data, n, &spec, LossKind::CrossEntropy)?;
    let mut summary = RunSummary::default();
    if let Some(dir) = out_dir {
        let path = dir.join("level_curve.csv");
        write_table(&path, LEVEL_CURVE_HEADER, level_curve_rows(&rows))?;
        summary.files.push(path);
    }
    let max = rows.iter().map(|r| r.loss_diff).fold(0.0, f64::max);
    let mean_l1 = rows.iter().map(|r| r.weight_l1_diff).sum::<f64>() / rows.len().max(1) as f64;
    summary.notes.push(format!(
        "{n} teleports: max loss diff {max:e}, mean weight L1 diff {mean_l1:e}"
    ));
    if strict && !(max <= VERIFY_TOLERANCE) {
        return Err(Error::InvalidArgument(format!(
            "teleportation changed the loss by {max:e} (tolerance {VERIFY_TOLERANCE:e})"
        )));
    }
    Ok(summary)
}

fn micro_angles(cfg: &ExperimentConfig, data: &Datasets, out_dir: &Path) -> Result<RunSummary> {
    let net = prepared_network(cfg, data)?;
    let mut mc = MicroAngleConfig::new(
        cfg.list_or("batch_sizes", &[8, 64])?,
        cfg.require("sigma")?,
        cfg.get_or("n_samples", 100)?,
        cfg.get_or("seed", 0)?,
    );
    mc.l2 = cfg.get_or("l2", 0.0)?;
    let samples = micro_angle_experiment(&net, &data.train, &mc)?;
    let path = out_dir.join("angles.csv");
    write_table(
        &path,
        ANGLES_HEADER,
        samples.iter().map(|s| {
            format!(
                "{},{},{},{}",
                s.pair_kind,
                s.batch_size,
                fmt_float(s.sigma),
                fmt_float(s.angle_degrees)
            )
        }),
    )?;
    Ok(RunSummary {
        files: vec![path],
        notes: vec![format!("{} angle samples", samples.len())],
    })
}

fn grad_scale(cfg: &ExperimentConfig, data: &Datasets, out_dir: &Path) -> Result<RunSummary> {
    let net = prepared_network(cfg, data)?;
    let sigmas: Vec<f64> = cfg.list_or("sigmas", &[0.1, 0.3, 0.5, 0.7, 0.9])?;
    let runs: usize = cfg.get_or("runs", 20)?;
    let kind: CobKind = cfg.get_or("cob_kind", CobKind::Inter)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let batch: usize = cfg.get_or("batch_size", DEFAULT_BATCH)?;
    let (x, y) = data.train.slice(0, batch.min(data.train.len()));
    let target = Target::Labels(y);
    let cells: Vec<(f64, usize, u64)> = sigmas
        .iter()
        .enumerate()
        .flat_map(|(si, &s)| (0..runs).map(move |r| (s, r, rng::child_seed(seed, (si * runs + r) as u64))))
        .collect();
    let gaps = cells
        .par_iter()
        .map(|&(s, _, cell_seed)| {
            let cob = sample_cob(&net, &CobSamplingSpec::new(kind, s, cell_seed)?)?;
            normalized_gradient_gap(&net, &cob, &x, &target, LossKind::CrossEntropy)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir.join("grad_scale.csv");
    write_table(
        &path,
        GRAD_SCALE_HEADER,
        cells
            .iter()
            .zip(&gaps)
            .map(|(&(s, r, _), g)| format!("{},{},{}", fmt_float(s), r, fmt_float(*g))),
    )?;
    let mut notes = Vec::new();
    for (si, s) in sigmas.iter().enumerate() {
        let mean = gaps[si * runs..(si + 1) * runs].iter().sum::<f64>() / runs.max(1) as f64;
        notes.push(format!("sigma {s}: mean normalized gap {mean:e}"));
    }
    Ok(RunSummary {
        files: vec![path],
        notes,
    })
}

/// Intra-landscape teleport followed by folding the activation scales back
/// into the weights, so two independently teleported networks still share
/// their activation functions.
pub fn teleport_for_interpolation(net: &Network, sigma: f64, seed: u64) -> Result<Network> {
    if sigma == 0.0 {
        return Ok(net.clone());
    }
    let cob = sample_cob(net, &CobSamplingSpec::new(CobKind::Intra, sigma, seed)?)?;
    let (mut v, _) = teleport(net, &cob)?;
    v.normalize_activation_scales()?;
    Ok(v)
}

fn interpolate(cfg: &ExperimentConfig, data: &Datasets, out_dir: &Path) -> Result<RunSummary> {
    let batches: Vec<usize> = cfg.list_or("batch_sizes", &[8, 128])?;
    if batches.len() != 2 {
        return Err(Error::Config(format!(
            "key 'batch_sizes' needs exactly two entries for interpolation, got {}",
            batches.len()
        )));
    }
    if let Some(kind) = cfg.get::<CobKind>("cob_kind")? {
        if kind != CobKind::Intra {
            return Err(Error::Config("interpolation only supports cob_kind=intra".into()));
        }
    }
    let sigma: f64 = cfg.get_or("sigma", 0.0)?;
    let steps: usize = cfg.get_or("steps", 25)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let base = build_network(cfg, &data.train)?;
    let mut ends = Vec::with_capacity(2);
    for (i, &b) in batches.iter().enumerate() {
        let trained = train(&base, &data.train, &data.val, &train_config(cfg, b)?)?.network;
        ends.push(teleport_for_interpolation(&trained, sigma, rng::child_seed(seed, i as u64))?);
    }
    let points = interpolate_networks(&ends[0], &ends[1], steps, &data.train, &data.val, LossKind::CrossEntropy)?;
    let path = out_dir.join("interpolation.csv");
    write_table(
        &path,
        INTERPOLATION_HEADER,
        points.iter().map(|p| {
            format!(
                "{},{},{},{},{}",
                fmt_float(p.alpha),
                fmt_float(p.train_loss),
                fmt_float(p.val_loss),
                fmt_float(p.train_acc),
                fmt_float(p.val_acc)
            )
        }),
    )?;
    let vl: Vec<f64> = points.iter().map(|p| p.val_loss).collect();
    Ok(RunSummary {
        files: vec![path],
        notes: vec![format!(
            "sigma {sigma}: validation curvature proxy {:e}",
            crate::analysis::curvature_proxy(&vl)?
        )],
    })
}

fn training(cfg: &ExperimentConfig, data: &Datasets, out_dir: &Path, mode: TeleportMode) -> Result<RunSummary> {
    let mut tc = train_config(cfg, cfg.get_or("batch_size", DEFAULT_BATCH)?)?;
    let at: Option<usize> = match mode {
        TeleportMode::Pseudo => Some(cfg.require("teleport_epoch")?),
        TeleportMode::Teleport => cfg.get("teleport_epoch")?,
    };
    if let Some(at) = at {
        let spec = CobSamplingSpec::new(
            cfg.get_or("cob_kind", CobKind::Inter)?,
            cfg.get_or("sigma", 0.9)?,
            rng::child_seed(tc.seed, 0),
        )?;
        tc.teleport = Some(TeleportEvent {
            timing: TeleportTiming::AtEpoch(at),
            spec,
            mode,
        });
    }
    let net = cfg.model.build(data.train.sample_shape(), data.train.classes())?;
    let outcome = train(&net, &data.train, &data.val, &tc)?;
    let path = out_dir.join("training.csv");
    write_table(
        &path,
        TRAINING_HEADER,
        outcome.epochs.iter().map(|e| {
            format!(
                "{},{},{},{},{},{}",
                e.epoch,
                fmt_float(e.train_loss),
                fmt_float(e.val_loss),
                fmt_float(e.val_accuracy),
                fmt_float(e.grad_norm_normalized),
                e.teleported
            )
        }),
    )?;
    let ckpt = out_dir.join("final.ntlp");
    save_checkpoint(&outcome.network, &ckpt)?;
    let mut notes = Vec::new();
    if let Some(last) = outcome.epochs.last() {
        notes.push(format!("final val loss {:e}, val acc {}", last.val_loss, last.val_accuracy));
    }
    if let Some(r) = &outcome.teleport {
        notes.push(format!(
            "event after epoch {}: val loss {:e} -> {:e}, grad norm {:e} -> {:e}, displacement {:e}",
            r.after_epoch, r.val_loss_before, r.val_loss_after, r.grad_norm_before, r.grad_norm_after, r.displacement_norm
        ));
    }
    Ok(RunSummary {
        files: vec![path, ckpt],
        notes,
    })
}

fn feature_maps(cfg: &ExperimentConfig, data: &Datasets, out_dir: &Path) -> Result<RunSummary> {
    let net = prepared_network(cfg, data)?;
    let spec = CobSamplingSpec::new(
        cfg.get_or("cob_kind", CobKind::Inter)?,
        cfg.get_or("sigma", 0.9)?,
        cfg.get_or("seed", 0)?,
    )?;
    let (tele, _) = teleport(&net, &sample_cob(&net, &spec)?)?;
    let nodes: Vec<usize> = match cfg.get::<usize>("layer")? {
        Some(l) => vec![l],
        None => (1..net.node_count()).collect(),
    };
    let (x, _) = data.train.slice(0, 1);
    let mut rows = Vec::new();
    for (name, n) in [("original", &net), ("teleported", &tele)] {
        for &node in &nodes {
            let t = extract_feature_maps(n, &x, node)?;
            for (j, v) in t.data().iter().enumerate() {
                let mut row = String::new();
                write!(row, "{name},{node},{j},{}", fmt_float(*v)).expect("string write");
                rows.push(row);
            }
        }
    }
    let path = out_dir.join("feature_maps.csv");
    write_table(&path, FEATURE_MAPS_HEADER, rows)?;
    Ok(RunSummary {
        files: vec![path],
        notes: vec![format!("{} nodes dumped for both networks", nodes.len())],
    })
}

/// Run the configured experiment, writing its tables into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, data_root: &Path) -> Result<RunSummary> {
    let data = load_datasets(cfg, data_root)?;
    fs::create_dir_all(out_dir)?;
    match cfg.experiment {
        ExperimentKind::Verify => level_curve(cfg, &build_network(cfg, &data.train)?, &data.train, Some(out_dir), true),
        ExperimentKind::LevelCurve => level_curve(cfg, &prepared_network(cfg, &data)?, &data.train, Some(out_dir), false),
        ExperimentKind::MicroAngles => micro_angles(cfg, &data, out_dir),
        ExperimentKind::GradScale => grad_scale(cfg, &data, out_dir),
        ExperimentKind::Interpolate => interpolate(cfg, &data, out_dir),
        ExperimentKind::Train => training(cfg, &data, out_dir, TeleportMode::Teleport),
        ExperimentKind::Pseudo => training(cfg, &data, out_dir, TeleportMode::Pseudo),
        ExperimentKind::FeatureMaps => feature_maps(cfg, &data, out_dir),
    }
}

/// Teleport a saved network as described by `cfg` and fail if the loss on
/// the configured dataset moves by more than [`VERIFY_TOLERANCE`].
pub fn verify_checkpoint(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    data_root: &Path,
    out_dir: Option<&Path>,
) -> Result<RunSummary> {
    let mut net = load_checkpoint(checkpoint)?;
    let data = load_datasets(cfg, data_root)?;
    let expected = cfg.model.build(data.train.sample_shape(), data.train.classes())?;
    if !net.same_architecture(&expected) {
        return Err(Error::Architecture(format!(
            "checkpoint {} is not a {} network for {} inputs",
            checkpoint.display(),
            cfg.model,
            cfg.dataset
        )));
    }
    net.set_batchnorm_mode(BatchNormMode::Eval);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    level_curve(cfg, &net, &data.train, out_dir, true)
}
