//! Experiment configuration: flat `key = value` files plus overrides.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::audit::{AblationMetric, MIA_EPOCHS, MIA_HIDDEN};
use crate::data::VerticalSplit;
use crate::nn::DEFAULT_DAMPING;
use crate::runtime::{PartyId, UpdateRule, VflConfig};
use crate::unlearn::{UnlearnParams, DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_U_EP};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    UnlearnParty,
    UnlearnFeature,
    UnlearnSample,
    Retrain,
    Audit,
    Ablation,
    Compare,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::UnlearnParty => "unlearn-party",
            Mode::UnlearnFeature => "unlearn-feature",
            Mode::UnlearnSample => "unlearn-sample",
            Mode::Retrain => "retrain",
            Mode::Audit => "audit",
            Mode::Ablation => "ablation",
            Mode::Compare => "compare",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('_', "-").as_str() {
            "train" => Mode::Train,
            "unlearn-party" => Mode::UnlearnParty,
            "unlearn-feature" => Mode::UnlearnFeature,
            "unlearn-sample" => Mode::UnlearnSample,
            "retrain" => Mode::Retrain,
            "audit" => Mode::Audit,
            "ablation" => Mode::Ablation,
            "compare" => Mode::Compare,
            other => return Err(Error::config("mode", format!("unknown mode {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic { n: usize, d: usize, classes: usize },
    Csv(PathBuf),
}

/// Everything a run needs. Defaults follow the reference protocol: three
/// parties, 50 epochs, unlearning at epoch 25, batch 512, rates 1e-2.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetSource,
    pub label_col: Option<String>,
    pub parties: usize,
    /// Explicit feature split; `None` splits columns equally.
    pub feature_split: Option<Vec<Vec<usize>>>,
    pub epochs: usize,
    pub unlearn_at: usize,
    pub target_party: Option<PartyId>,
    pub target_features: Vec<usize>,
    pub target_batches: Vec<u32>,
    pub lr_active: f64,
    pub lr_passive: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub u_ep: usize,
    pub distill_epochs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub update_rule: UpdateRule,
    pub damping: f64,
    pub passive_hidden: usize,
    pub embedding_width: usize,
    pub active_hidden: usize,
    pub label_only_active: bool,
    pub mia_hidden: usize,
    pub mia_epochs: usize,
    pub mia_from_epoch: usize,
    pub ablation_metric: AblationMetric,
    pub repeats: usize,
    pub tolerance: f64,
    pub method_csv: Option<PathBuf>,
    pub benchmark_csv: Option<PathBuf>,
    pub store_path: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Train,
            dataset: DatasetSource::Synthetic {
                n: 2000,
                d: 12,
                classes: 2,
            },
            label_col: None,
            parties: 3,
            feature_split: None,
            epochs: 50,
            unlearn_at: 25,
            target_party: None,
            target_features: Vec::new(),
            target_batches: Vec::new(),
            lr_active: 1e-2,
            lr_passive: 1e-2,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            u_ep: DEFAULT_U_EP,
            distill_epochs: None,
            batch_size: 512,
            seed: 0,
            update_rule: UpdateRule::Sgd,
            damping: DEFAULT_DAMPING,
            passive_hidden: 8,
            embedding_width: 8,
            active_hidden: 32,
            label_only_active: false,
            mia_hidden: MIA_HIDDEN,
            mia_epochs: MIA_EPOCHS,
            mia_from_epoch: 10,
            ablation_metric: AblationMetric::F1,
            repeats: 1,
            tolerance: 0.05,
            method_csv: None,
            benchmark_csv: None,
            store_path: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(field: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(field, s))
        .collect()
}

fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::config(field, format!("expected true or false, got {other:?}"))),
    }
}

/// Reads `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn read_config_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config("config", format!("line {}: expected `key = value`", i + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

impl ExperimentConfig {
    /// Applies one setting. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().trim_start_matches("--").replace('-', "_");
        let k = key.as_str();
        match k {
            "mode" => self.mode = parse(k, value)?,
            "dataset" => {
                self.dataset = if value.trim() == "synthetic" {
                    match self.dataset {
                        DatasetSource::Synthetic { .. } => self.dataset.clone(),
                        DatasetSource::Csv(_) => Self::default().dataset,
                    }
                } else {
                    DatasetSource::Csv(PathBuf::from(value.trim()))
                }
            }
            "synthetic_n" | "synthetic_d" | "synthetic_classes" => {
                let v: usize = parse(k, value)?;
                let (mut n, mut d, mut classes) = match self.dataset {
                    DatasetSource::Synthetic { n, d, classes } => (n, d, classes),
                    DatasetSource::Csv(_) => {
                        return Err(Error::config(k, "only applies to the synthetic dataset"))
                    }
                };
                match k {
                    "synthetic_n" => n = v,
                    "synthetic_d" => d = v,
                    _ => classes = v,
                }
                self.dataset = DatasetSource::Synthetic { n, d, classes };
            }
            "label_col" => self.label_col = Some(value.trim().to_string()),
            "parties" => self.parties = parse(k, value)?,
            "feature_split" => {
                let groups = value
                    .split(';')
                    .map(|g| parse_list(k, g))
                    .collect::<Result<Vec<Vec<usize>>>>()?;
                self.feature_split = Some(groups);
            }
            "epochs" => self.epochs = parse(k, value)?,
            "unlearn_at" => self.unlearn_at = parse(k, value)?,
            "target_party" => self.target_party = Some(parse(k, value)?),
            "target_features" => self.target_features = parse_list(k, value)?,
            "target_batches" => self.target_batches = parse_list(k, value)?,
            "lr_active" => self.lr_active = parse(k, value)?,
            "lr_passive" => self.lr_passive = parse(k, value)?,
            "alpha" => self.alpha = parse(k, value)?,
            "lambda" => self.lambda = parse(k, value)?,
            "u_ep" => self.u_ep = parse(k, value)?,
            "distill_epochs" => self.distill_epochs = Some(parse(k, value)?),
            "batch_size" => self.batch_size = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "update_rule" => self.update_rule = parse(k, value)?,
            "damping" => self.damping = parse(k, value)?,
            "passive_hidden" => self.passive_hidden = parse(k, value)?,
            "embedding_width" => self.embedding_width = parse(k, value)?,
            "active_hidden" => self.active_hidden = parse(k, value)?,
            "label_only_active" => self.label_only_active = parse_bool(k, value)?,
            "mia_hidden" => self.mia_hidden = parse(k, value)?,
            "mia_epochs" => self.mia_epochs = parse(k, value)?,
            "mia_from_epoch" => self.mia_from_epoch = parse(k, value)?,
            "metric" | "ablation_metric" => self.ablation_metric = parse(k, value)?,
            "repeats" => self.repeats = parse(k, value)?,
            "tolerance" => self.tolerance = parse(k, value)?,
            "method_csv" => self.method_csv = Some(PathBuf::from(value.trim())),
            "benchmark_csv" => self.benchmark_csv = Some(PathBuf::from(value.trim())),
            "store_path" => self.store_path = Some(PathBuf::from(value.trim())),
            "out" | "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            other => return Err(Error::config(other, "unknown setting")),
        }
        Ok(())
    }

    /// Defaults, then the config file pairs, then the overrides.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether the mode runs an unlearning request.
    pub fn has_request(&self) -> bool {
        matches!(
            self.mode,
            Mode::UnlearnParty | Mode::UnlearnFeature | Mode::UnlearnSample | Mode::Audit | Mode::Retrain
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.parties == 0 {
            return Err(Error::config("parties", "must be at least 1"));
        }
        if self.epochs == 0 && self.mode != Mode::Compare {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.has_request() && !(self.unlearn_at > 0 && self.unlearn_at < self.epochs) {
            return Err(Error::config(
                "unlearn_at",
                format!("must satisfy 0 < U < T, got U={} T={}", self.unlearn_at, self.epochs),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        for (field, v) in [
            ("lr_active", self.lr_active),
            ("lr_passive", self.lr_passive),
            ("lambda", self.lambda),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::config("tolerance", "must be non-negative"));
        }
        if self.u_ep == 0 {
            return Err(Error::config("u_ep", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if self.mia_epochs == 0 {
            return Err(Error::config("mia_epochs", "must be at least 1"));
        }
        match self.mode {
            Mode::UnlearnParty if self.target_party.is_none() => {
                return Err(Error::config("target_party", "required for unlearn-party"))
            }
            Mode::UnlearnFeature if self.target_features.is_empty() => {
                return Err(Error::config("target_features", "required for unlearn-feature"))
            }
            Mode::UnlearnSample if self.target_batches.is_empty() => {
                return Err(Error::config("target_batches", "required for unlearn-sample"))
            }
            Mode::Audit | Mode::Retrain
                if self.target_party.is_none()
                    && self.target_features.is_empty()
                    && self.target_batches.is_empty() =>
            {
                return Err(Error::config(
                    "target_party",
                    format!("{} needs a target party, features or batches", self.mode),
                ))
            }
            Mode::Compare if self.method_csv.is_none() || self.benchmark_csv.is_none() => {
                return Err(Error::config(
                    "method_csv",
                    "compare needs method_csv and benchmark_csv",
                ))
            }
            _ => {}
        }
        if let Some(split) = &self.feature_split {
            if split.len() != self.parties {
                return Err(Error::config(
                    "feature_split",
                    format!("{} groups for {} parties", split.len(), self.parties),
                ));
            }
        }
        Ok(())
    }

    pub fn split(&self, d: usize) -> Result<VerticalSplit> {
        let split = match &self.feature_split {
            Some(groups) => VerticalSplit::new(groups.clone()),
            None => VerticalSplit::equal(d, self.parties)?,
        };
        split.validate(d)?;
        Ok(split)
    }

    pub fn vfl_config(&self, seed: u64) -> VflConfig {
        VflConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_active: self.lr_active,
            lr_passive: self.lr_passive,
            update_rule: self.update_rule,
            damping: self.damping,
            seed,
            data_seed: seed,
            passive_hidden: self.passive_hidden,
            embedding_width: self.embedding_width,
            active_hidden: self.active_hidden,
            label_only_active: self.label_only_active,
            retain_epochs: None,
        }
    }

    pub fn unlearn_params(&self, seed: u64) -> UnlearnParams {
        UnlearnParams {
            alpha: self.alpha,
            lr: self.lr_active,
            lambda: self.lambda,
            u_ep: self.u_ep,
            distill_epochs: self.distill_epochs,
            update_rule: self.update_rule,
            damping: self.damping,
            batch_size: self.batch_size,
            seed: seed.wrapping_add(STUDENT_SEED_OFFSET),
        }
    }

    pub fn target_feature_set(&self) -> BTreeSet<usize> {
        self.target_features.iter().copied().collect()
    }
}

/// Offsets that derive the student and benchmark seeds from the run seed.
pub const STUDENT_SEED_OFFSET: u64 = 0x5157;
pub const BENCHMARK_SEED_OFFSET: u64 = 1_000_003;
