//! Flat TOML run configuration.
//!
//! Every key is optional; missing keys keep their defaults. Unknown keys are
//! rejected. `--set key=value` on the command line is applied after the
//! file, with `value` parsed as a TOML value (bare words fall back to
//! strings).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::graph::{build_features, max_degree, parse_tu_dataset, FeatureMode, GraphDataset};
use crate::trainer::{NegativeSource, TrainConfig};

pub const CONFIG_VERSION: i64 = 1;

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Every term, self-view negatives.
    Full,
    /// Negatives are strong views of another graph of the batch.
    Rd,
    /// No masked self-contrast: `λ1 = λ2 = 0`.
    Nm,
    /// No absolute-distance term: `λ3 = 0`.
    NB,
    /// Mean squared distance instead of Barlow Twins.
    Mse,
    /// Other-graph negatives and the triplet term alone.
    Rdt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::Rd,
        Variant::Nm,
        Variant::NB,
        Variant::Mse,
        Variant::Rdt,
    ];

    /// Overrides the settings that define the variant.
    pub fn apply(self, train: &mut TrainConfig) {
        let loss = &mut train.loss;
        match self {
            Variant::Full => {}
            Variant::Rd => train.negatives = NegativeSource::OtherGraph,
            Variant::Nm => {
                loss.lambda1 = 0.0;
                loss.lambda2 = 0.0;
            }
            Variant::NB => loss.lambda3 = 0.0,
            Variant::Mse => loss.regularizer = crate::losses::AbsRegularizer::Mse,
            Variant::Rdt => {
                train.negatives = NegativeSource::OtherGraph;
                loss.lambda1 = 0.0;
                loss.lambda2 = 0.0;
                loss.lambda3 = 0.0;
            }
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (full, rd, nm, nB, mse, rdt)"
                ))
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Rd => "rd",
            Variant::Nm => "nm",
            Variant::NB => "nB",
            Variant::Mse => "mse",
            Variant::Rdt => "rdt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureChoice {
    /// Node labels when every graph has them, degrees otherwise.
    Auto,
    NodeLabel,
    Degree,
}

impl FromStr for FeatureChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(FeatureChoice::Auto),
            "node_label" => Ok(FeatureChoice::NodeLabel),
            "degree" => Ok(FeatureChoice::Degree),
            _ => Err(Error::Config(format!("unknown feature mode `{s}`"))),
        }
    }
}

impl fmt::Display for FeatureChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureChoice::Auto => "auto",
            FeatureChoice::NodeLabel => "node_label",
            FeatureChoice::Degree => "degree",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory holding the TU files.
    pub dataset: PathBuf,
    /// File prefix inside `dataset`; defaults to the directory name.
    pub dataset_name: Option<String>,
    pub features: FeatureChoice,
    /// Degree one-hot width minus one; larger degrees are clamped. Defaults
    /// to the largest degree in the dataset.
    pub max_degree: Option<usize>,
    pub output_dir: PathBuf,
    pub variant: Variant,
    /// `model.input_dim` is ignored here and taken from the dataset.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Write measured epoch durations into the training CSV instead of 0.
    pub record_wall_time: bool,
    pub gradcheck_batch: usize,
    pub gradcheck_step: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data/MUTAG"),
            dataset_name: None,
            features: FeatureChoice::Auto,
            max_degree: None,
            output_dir: PathBuf::from("runs/default"),
            variant: Variant::Full,
            train: TrainConfig::new(0),
            eval: EvalConfig::default(),
            record_wall_time: false,
            gradcheck_batch: 4,
            gradcheck_step: 1e-5,
        }
    }
}

/// Keys in manifest order.
pub const KEYS: &[&str] = &[
    "version",
    "dataset",
    "dataset_name",
    "features",
    "max_degree",
    "output_dir",
    "variant",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "augmentation",
    "r_a",
    "r_b",
    "negatives",
    "num_layers",
    "hidden_dim",
    "embed_dim",
    "num_factors",
    "abs_dim",
    "g2_out_dim",
    "lambda1",
    "lambda2",
    "lambda3",
    "epsilon",
    "beta",
    "regularizer",
    "hsic_kernel",
    "hsic_samples",
    "detach_weights",
    "folds",
    "runs",
    "c_grid",
    "svm_epochs",
    "eval_seed",
    "record_wall_time",
    "gradcheck_batch",
    "gradcheck_step",
];

fn type_error(key: &str, want: &str, v: &Value) -> Error {
    Error::Config(format!("`{key}` expects {want}, got {v}"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(type_error(key, "a non-negative integer", v)),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(type_error(key, "a non-negative integer", v)),
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_error(key, "a number", v)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_error(key, "a boolean", v))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| type_error(key, "a string", v))
}

fn parsed<T: FromStr<Err = Error>>(key: &str, v: &Value) -> Result<T> {
    as_str(key, v)?.parse()
}

fn string(s: impl ToString) -> Value {
    Value::String(s.to_string())
}

fn int(i: usize) -> Value {
    Value::Integer(i as i64)
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Ingestion {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = RunConfig::default();
        config.merge_str(&text)?;
        Ok(config)
    }

    /// Applies every key of a TOML document.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        let table: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        // version first, so a newer file fails on the version, not on a key
        if let Some(v) = table.get("version") {
            self.set("version", v)?;
        }
        for (k, v) in &table {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match format!("v = {raw}").parse::<Table>() {
            Ok(mut t) => t.remove("v").unwrap_or_else(|| string(raw)),
            Err(_) => string(raw),
        };
        self.set(key, &value)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let t = &mut self.train;
        match key {
            "version" => {
                let found = v
                    .as_integer()
                    .ok_or_else(|| type_error(key, "an integer", v))?;
                if found != CONFIG_VERSION {
                    return Err(Error::Version {
                        expected: CONFIG_VERSION.to_string(),
                        found: found.to_string(),
                    });
                }
            }
            "dataset" => self.dataset = PathBuf::from(as_str(key, v)?),
            "dataset_name" => {
                let s = as_str(key, v)?;
                self.dataset_name = (!s.is_empty()).then(|| s.to_string());
            }
            "features" => self.features = parsed(key, v)?,
            "max_degree" => {
                // a negative value restores the dataset maximum
                self.max_degree = match v.as_integer() {
                    Some(i) if i < 0 => None,
                    _ => Some(as_usize(key, v)?),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(as_str(key, v)?),
            "variant" => self.variant = parsed(key, v)?,
            "seed" => t.seed = as_u64(key, v)?,
            "epochs" => t.epochs = as_usize(key, v)?,
            "batch_size" => t.batch_size = as_usize(key, v)?,
            "learning_rate" => t.learning_rate = as_f64(key, v)?,
            "adam_beta1" => t.adam.beta1 = as_f64(key, v)?,
            "adam_beta2" => t.adam.beta2 = as_f64(key, v)?,
            "adam_eps" => t.adam.eps = as_f64(key, v)?,
            "augmentation" => {
                t.augmentation = parsed::<crate::augment::AugmentationSpec>(key, v)
                    .map_err(|e| Error::Config(e.to_string()))?
            }
            "r_a" => t.r_a = as_f64(key, v)?,
            "r_b" => t.r_b = as_f64(key, v)?,
            "negatives" => t.negatives = parsed(key, v)?,
            "num_layers" => t.model.num_layers = as_usize(key, v)?,
            "hidden_dim" => t.model.hidden_dim = as_usize(key, v)?,
            "embed_dim" => t.model.embed_dim = as_usize(key, v)?,
            "num_factors" => t.model.num_factors = as_usize(key, v)?,
            "abs_dim" => t.model.abs_dim = as_usize(key, v)?,
            "g2_out_dim" => t.model.g2_out_dim = as_usize(key, v)?,
            "lambda1" => t.loss.lambda1 = as_f64(key, v)?,
            "lambda2" => t.loss.lambda2 = as_f64(key, v)?,
            "lambda3" => t.loss.lambda3 = as_f64(key, v)?,
            "epsilon" => t.loss.epsilon = as_f64(key, v)?,
            "beta" => t.loss.beta = as_f64(key, v)?,
            "regularizer" => t.loss.regularizer = parsed(key, v)?,
            "hsic_kernel" => t.loss.hsic_kernel = parsed(key, v)?,
            "hsic_samples" => t.loss.hsic_samples = parsed(key, v)?,
            "detach_weights" => t.loss.detach_weights = as_bool(key, v)?,
            "folds" => self.eval.folds = as_usize(key, v)?,
            "runs" => self.eval.runs = as_usize(key, v)?,
            "c_grid" => {
                let items = v.as_array().ok_or_else(|| type_error(key, "an array", v))?;
                self.eval.c_grid = items
                    .iter()
                    .map(|x| as_f64(key, x))
                    .collect::<Result<_>>()?;
            }
            "svm_epochs" => self.eval.svm_epochs = as_usize(key, v)?,
            "eval_seed" => self.eval.seed = as_u64(key, v)?,
            "record_wall_time" => self.record_wall_time = as_bool(key, v)?,
            "gradcheck_batch" => self.gradcheck_batch = as_usize(key, v)?,
            "gradcheck_step" => self.gradcheck_step = as_f64(key, v)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` as written in a manifest.
    pub fn get(&self, key: &str) -> Result<Value> {
        let t = &self.train;
        Ok(match key {
            "version" => Value::Integer(CONFIG_VERSION),
            "dataset" => string(self.dataset.display()),
            "dataset_name" => string(self.dataset_name.clone().unwrap_or_default()),
            "features" => string(self.features),
            "max_degree" => Value::Integer(self.max_degree.map_or(-1, |d| d as i64)),
            "output_dir" => string(self.output_dir.display()),
            "variant" => string(self.variant),
            "seed" => Value::Integer(t.seed as i64),
            "epochs" => int(t.epochs),
            "batch_size" => int(t.batch_size),
            "learning_rate" => Value::Float(t.learning_rate),
            "adam_beta1" => Value::Float(t.adam.beta1),
            "adam_beta2" => Value::Float(t.adam.beta2),
            "adam_eps" => Value::Float(t.adam.eps),
            "augmentation" => string(&t.augmentation),
            "r_a" => Value::Float(t.r_a),
            "r_b" => Value::Float(t.r_b),
            "negatives" => string(t.negatives),
            "num_layers" => int(t.model.num_layers),
            "hidden_dim" => int(t.model.hidden_dim),
            "embed_dim" => int(t.model.embed_dim),
            "num_factors" => int(t.model.num_factors),
            "abs_dim" => int(t.model.abs_dim),
            "g2_out_dim" => int(t.model.g2_out_dim),
            "lambda1" => Value::Float(t.loss.lambda1),
            "lambda2" => Value::Float(t.loss.lambda2),
            "lambda3" => Value::Float(t.loss.lambda3),
            "epsilon" => Value::Float(t.loss.epsilon),
            "beta" => Value::Float(t.loss.beta),
            "regularizer" => string(t.loss.regularizer),
            "hsic_kernel" => string(t.loss.hsic_kernel),
            "hsic_samples" => string(t.loss.hsic_samples),
            "detach_weights" => Value::Boolean(t.loss.detach_weights),
            "folds" => int(self.eval.folds),
            "runs" => int(self.eval.runs),
            "c_grid" => Value::Array(self.eval.c_grid.iter().map(|&c| Value::Float(c)).collect()),
            "svm_epochs" => int(self.eval.svm_epochs),
            "eval_seed" => Value::Integer(self.eval.seed as i64),
            "record_wall_time" => Value::Boolean(self.record_wall_time),
            "gradcheck_batch" => int(self.gradcheck_batch),
            "gradcheck_step" => Value::Float(self.gradcheck_step),
            other => return Err(Error::UnknownKey(other.to_string())),
        })
    }

    /// The variant applied on top of the configured training settings.
    pub fn resolved(&self) -> RunConfig {
        let mut r = self.clone();
        r.variant.apply(&mut r.train);
        r
    }

    /// Every key of the resolved config, one `key = value` line each.
    pub fn manifest(&self) -> String {
        let resolved = self.resolved();
        let mut out = String::new();
        for key in KEYS {
            let v = resolved.get(key).expect("every listed key is readable");
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }

    pub fn dataset_name(&self) -> String {
        self.dataset_name.clone().unwrap_or_else(|| {
            self.dataset
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }

    /// Reads the dataset and builds its node features.
    pub fn load_dataset(&self) -> Result<GraphDataset> {
        let raw = parse_tu_dataset(&self.dataset, &self.dataset_name())?;
        let labelled = raw.graphs.iter().all(|g| g.node_labels().is_some());
        let use_labels = match self.features {
            FeatureChoice::Auto => labelled,
            FeatureChoice::NodeLabel => true,
            FeatureChoice::Degree => false,
        };
        let mode = if use_labels {
            FeatureMode::NodeLabel
        } else {
            FeatureMode::Degree {
                max_degree: self.max_degree.unwrap_or_else(|| max_degree(&raw)),
                clamp: true,
            }
        };
        build_features(&raw, mode)
    }

    /// Resolved training settings for a dataset.
    pub fn train_config(&self, dataset: &GraphDataset) -> TrainConfig {
        let mut t = self.resolved().train;
        t.model.input_dim = dataset.feature_dim;
        t
    }
}
