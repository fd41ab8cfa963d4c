//! Run configuration read from a JSON object with flat dotted keys, e.g.
//! `{"seed": 7, "bridge.sigma": 0.2}`, plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::bridge::BridgeConfig;
use crate::data::{Provenance, SplitMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;
use crate::ot::{CostMetric, Epsilon, Extraction, PairingStrategy, SinkhornConfig};
use crate::training::{ModelConfig, TrainConfig};

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "data.path",
    "data.provenance",
    "data.hvg",
    "split.mode",
    "split.fraction",
    "split.seen_perturbations",
    "train.epochs",
    "train.batch_size",
    "train.pairing",
    "train.discrete",
    "train.checkpoint_every",
    "model.width",
    "model.depth",
    "model.time_features",
    "model.residual",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "bridge.horizon",
    "bridge.sigma",
    "bridge.steps",
    "sinkhorn.epsilon_scale",
    "sinkhorn.epsilon",
    "sinkhorn.max_iters",
    "sinkhorn.tolerance",
    "sinkhorn.metric",
    "synth.n_genes",
    "synth.n_cells_per_condition",
    "synth.n_conditions",
    "synth.n_cell_types",
    "synth.cluster_count",
    "synth.shift_magnitude",
    "synth.sparsity",
    "generate.run_dir",
    "generate.cell_type",
    "generate.perturbation",
    "generate.dosage",
    "generate.count",
    "evaluate.run_dir",
    "evaluate.self_test",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub provenance: Provenance,
    /// Number of highly variable genes to keep; 0 keeps all.
    pub hvg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSection {
    pub mode: SplitMode,
    pub fraction: f64,
    pub seen_perturbations: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSection {
    pub run_dir: Option<PathBuf>,
    pub cell_type: Option<String>,
    pub perturbation: Option<String>,
    pub dosage: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSection {
    pub run_dir: Option<PathBuf>,
    pub self_test: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub split: SplitSection,
    pub train: TrainConfig,
    /// Write a checkpoint every k epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub synth: SyntheticSpec,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            data: DataSection {
                path: None,
                provenance: Provenance::Log1p,
                hvg: 0,
            },
            split: SplitSection {
                mode: SplitMode::ByConditionGroup,
                fraction: 0.3,
                seen_perturbations: true,
            },
            train: TrainConfig::default(),
            checkpoint_every: 0,
            synth: SyntheticSpec::default(),
            generate: GenerateSection {
                run_dir: None,
                cell_type: None,
                perturbation: None,
                dosage: 0.0,
                count: 100,
            },
            evaluate: EvaluateSection {
                run_dir: None,
                self_test: false,
            },
        }
    }
}

fn bad(key: &str, v: &Value, want: &str) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64().ok_or_else(|| bad(key, v, "a non-negative integer"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| bad(key, v, "a number"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, v, "true or false"))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, v, "a string"))
}

fn choice<T: Copy>(key: &str, v: &Value, options: &[(&str, T)]) -> Result<T> {
    let s = as_str(key, v)?;
    options
        .iter()
        .find(|(name, _)| *name == s)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|o| o.0).collect();
            Error::Config(format!("{key}: `{s}` is not one of {}", names.join(", ")))
        })
}

impl RunConfig {
    /// Parses a JSON object of dotted keys on top of the defaults.
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config(format!("{}: expected a JSON object", path.display())))?;
        let mut cfg = Self::default();
        for (k, v) in obj {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Applies `key=value`; the value is read as JSON, falling back to a
    /// plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.set(k.trim(), &value)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let path = |v: &Value| as_str(key, v).map(|s| Some(PathBuf::from(s)));
        match key {
            "seed" => self.seed = Some(as_u64(key, v)?),
            "out" => self.out = path(v)?,
            "data.path" => self.data.path = path(v)?,
            "data.provenance" => {
                self.data.provenance =
                    choice(key, v, &[("log1p", Provenance::Log1p), ("raw", Provenance::Raw)])?
            }
            "data.hvg" => self.data.hvg = as_usize(key, v)?,
            "split.mode" => {
                self.split.mode = choice(
                    key,
                    v,
                    &[
                        ("condition_group", SplitMode::ByConditionGroup),
                        ("perturbation", SplitMode::ByPerturbation),
                    ],
                )?
            }
            "split.fraction" => self.split.fraction = as_f64(key, v)?,
            "split.seen_perturbations" => self.split.seen_perturbations = as_bool(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.pairing" => {
                self.train.pairing = choice(
                    key,
                    v,
                    &[
                        ("ot", PairingStrategy::Ot(Extraction::Sample)),
                        ("ot_argmax", PairingStrategy::Ot(Extraction::Argmax)),
                        ("random", PairingStrategy::Random),
                    ],
                )?
            }
            "train.discrete" => self.train.discrete = as_bool(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = as_usize(key, v)?,
            "model.width" => {
                let w = as_usize(key, v)?;
                let depth = self.train.model.hidden.len();
                self.train.model.hidden = vec![w; depth];
            }
            "model.depth" => {
                let d = as_usize(key, v)?;
                let w = self.train.model.hidden.first().copied().unwrap_or(256);
                self.train.model.hidden = vec![w; d];
            }
            "model.time_features" => self.train.model.time_features = as_usize(key, v)?,
            "model.residual" => self.train.model.residual = as_bool(key, v)?,
            "optim.lr" => self.train.optimizer.learning_rate = as_f64(key, v)?,
            "optim.beta1" => self.train.optimizer.beta1 = as_f64(key, v)?,
            "optim.beta2" => self.train.optimizer.beta2 = as_f64(key, v)?,
            "optim.eps" => self.train.optimizer.epsilon = as_f64(key, v)?,
            "optim.weight_decay" => self.train.optimizer.weight_decay = as_f64(key, v)?,
            "bridge.horizon" => self.train.bridge.horizon = as_f64(key, v)?,
            "bridge.sigma" => self.train.bridge.sigma = as_f64(key, v)?,
            "bridge.steps" => self.train.bridge.steps = as_usize(key, v)?,
            "sinkhorn.epsilon_scale" => {
                self.train.sinkhorn.epsilon = Epsilon::RelativeToMeanCost(as_f64(key, v)?)
            }
            "sinkhorn.epsilon" => self.train.sinkhorn.epsilon = Epsilon::Absolute(as_f64(key, v)?),
            "sinkhorn.max_iters" => self.train.sinkhorn.max_iters = as_usize(key, v)?,
            "sinkhorn.tolerance" => self.train.sinkhorn.tolerance = as_f64(key, v)?,
            "sinkhorn.metric" => {
                self.train.sinkhorn.metric = choice(
                    key,
                    v,
                    &[
                        ("squared_euclidean", CostMetric::SquaredEuclidean),
                        ("euclidean", CostMetric::Euclidean),
                        ("cosine_distance", CostMetric::CosineDistance),
                    ],
                )?
            }
            "synth.n_genes" => self.synth.n_genes = as_usize(key, v)?,
            "synth.n_cells_per_condition" => self.synth.n_cells_per_condition = as_usize(key, v)?,
            "synth.n_conditions" => self.synth.n_conditions = as_usize(key, v)?,
            "synth.n_cell_types" => self.synth.n_cell_types = as_usize(key, v)?,
            "synth.cluster_count" => self.synth.cluster_count = as_usize(key, v)?,
            "synth.shift_magnitude" => self.synth.shift_magnitude = as_f64(key, v)?,
            "synth.sparsity" => self.synth.sparsity = as_f64(key, v)?,
            "generate.run_dir" => self.generate.run_dir = path(v)?,
            "generate.cell_type" => self.generate.cell_type = Some(as_str(key, v)?.to_string()),
            "generate.perturbation" => {
                self.generate.perturbation = Some(as_str(key, v)?.to_string())
            }
            "generate.dosage" => self.generate.dosage = as_f64(key, v)?,
            "generate.count" => self.generate.count = as_usize(key, v)?,
            "evaluate.run_dir" => self.evaluate.run_dir = path(v)?,
            "evaluate.self_test" => self.evaluate.self_test = as_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Seeds have no default.
    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            seed: self.seed()?,
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            seed: self.seed()?,
            ..self.synth.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn bridge(&self) -> BridgeConfig {
        self.train.bridge
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        self.train.optimizer
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        self.train.sinkhorn
    }

    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }
}
