//! Flat `key=value` experiment configuration.
//!
//! One pair per line (or several separated by whitespace); `#` starts a
//! comment. Keys outside [`KNOWN_KEYS`] are rejected, and a missing key is
//! reported by name when an experiment asks for it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::Preset;

pub const KNOWN_KEYS: &[&str] = &[
    "experiment",
    "model",
    "dataset",
    "sigma",
    "cob_kind",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "teleport_epoch",
    "n_teleports",
    "steps",
    "subset_size",
    "optimizer",
    "init",
    "n_samples",
    "l2",
    "layer",
    "batch_sizes",
    "sigmas",
    "runs",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Verify,
    LevelCurve,
    MicroAngles,
    GradScale,
    Interpolate,
    Train,
    Pseudo,
    FeatureMaps,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::Verify,
        ExperimentKind::LevelCurve,
        ExperimentKind::MicroAngles,
        ExperimentKind::GradScale,
        ExperimentKind::Interpolate,
        ExperimentKind::Train,
        ExperimentKind::Pseudo,
        ExperimentKind::FeatureMaps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Verify => "verify",
            ExperimentKind::LevelCurve => "level-curve",
            ExperimentKind::MicroAngles => "micro-angles",
            ExperimentKind::GradScale => "grad-scale",
            ExperimentKind::Interpolate => "interpolate",
            ExperimentKind::Train => "train",
            ExperimentKind::Pseudo => "pseudo",
            ExperimentKind::FeatureMaps => "feature-maps",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Random,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Random => "random",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            "random" => Ok(DatasetKind::Random),
            _ => Err(Error::Config(format!("unknown dataset '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: Preset,
    pub dataset: DatasetKind,
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("");
            for token in line.split_whitespace() {
                let (key, value) = token.split_once('=').ok_or_else(|| {
                    Error::Config(format!("line {}: expected key=value, got '{token}'", lineno + 1))
                })?;
                if !KNOWN_KEYS.contains(&key) {
                    return Err(Error::Config(format!("unknown key '{key}' on line {}", lineno + 1)));
                }
                if value.is_empty() {
                    return Err(Error::Config(format!("key '{key}' has an empty value")));
                }
                if values.insert(key.to_string(), value.to_string()).is_some() {
                    return Err(Error::Config(format!("key '{key}' given twice")));
                }
            }
        }
        let required = |key: &str| {
            values
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
        };
        let experiment = required("experiment")?.parse()?;
        let model = required("model")?
            .parse()
            .map_err(|e| Error::Config(format!("key 'model': {e}")))?;
        let dataset = required("dataset")?.parse()?;
        Ok(ExperimentConfig {
            experiment,
            model,
            dataset,
            values,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parsed value of an optional key.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{v}': {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get(key)?.ok_or_else(|| {
            Error::Config(format!("missing required key '{key}' for experiment {}", self.experiment))
        })
    }

    /// Comma-separated list.
    pub fn list_or<T: FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.parse()
                        .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{item}': {e}")))
                })
                .collect(),
        }
    }
}
