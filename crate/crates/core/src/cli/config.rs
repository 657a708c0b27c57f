//! JSON run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::data::{self, split_classes, synth_blobs, LabeledDataset, Role};
use crate::head::HeadConfig;
use crate::nn::{FeatureTap, TrainConfig};

/// Where a dataset comes from: exactly one of an IDX pair or the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> usize {
    12
}
fn default_separation() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Original labels to keep; all when absent.
    #[serde(default)]
    pub keep: Option<Vec<usize>>,
    /// Remap kept labels to `0..keep.len()`.
    #[serde(default)]
    pub relabel: bool,
    /// Keep only the first `limit` samples after filtering.
    #[serde(default)]
    pub limit: Option<usize>,
}

impl DatasetSpec {
    pub fn idx(images: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        Self {
            source: DataSource::Idx {
                images: images.into(),
                labels: labels.into(),
            },
            keep: None,
            relabel: false,
            limit: None,
        }
    }

    pub fn keep(mut self, classes: &[usize], relabel: bool) -> Self {
        self.keep = Some(classes.to_vec());
        self.relabel = relabel;
        self
    }

    pub fn limit(mut self, limit: usize) -> Self {
        self.limit = Some(limit);
        self
    }

    fn check_paths(&self, base: &Path) -> Result<(), CliError> {
        if let DataSource::Idx { images, labels } = &self.source {
            for p in [images, labels] {
                let p = resolve(base, p);
                if !p.is_file() {
                    return Err(CliError::Config(format!("dataset file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn load(&self, base: &Path, role: Role) -> Result<LabeledDataset, CliError> {
        let ds = match &self.source {
            DataSource::Idx { images, labels } => {
                LabeledDataset::load_idx_pair(&resolve(base, images), &resolve(base, labels), role)
                    .map_err(|source| CliError::Data { stage: "load", source })?
            }
            DataSource::Synthetic(s) => {
                if s.classes < 2 || s.per_class == 0 || s.side < 12 {
                    return Err(CliError::Config(format!(
                        "synthetic source needs ≥2 classes, ≥1 sample per class and side ≥12 (got {s:?})"
                    )));
                }
                synth_blobs(s.classes, s.per_class, s.side, s.separation, s.seed).with_role(role)
            }
        };
        let ds = match &self.keep {
            Some(keep) => split_classes(&ds, keep, self.relabel).map_err(|source| CliError::Data { stage: "split", source })?,
            None => ds,
        };
        let ds = match self.limit {
            Some(n) => ds.take(n),
            None => ds,
        };
        if ds.is_empty() {
            return Err(CliError::Data {
                stage: "split",
                source: data::DataError::EmptySplit,
            });
        }
        Ok(ds)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.1, 1.0]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_percentile() -> f64 {
    crate::detector::DEFAULT_PERCENTILE
}
fn default_tau() -> f64 {
    0.5
}
fn default_ridge() -> f64 {
    1e-6
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_projection_limit() -> usize {
    2000
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub main_train: DatasetSpec,
    pub main_test: DatasetSpec,
    /// Needed only by the supervised head.
    #[serde(default)]
    pub anomaly_train: Option<DatasetSpec>,
    pub anomaly_test: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub feature_tap: FeatureTap,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Relative covariance ridge.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Samples per side (normal / OOD) in the PCA export.
    #[serde(default = "default_projection_limit")]
    pub projection_limit: usize,
    #[serde(default = "default_true")]
    pub save_archives: bool,
    /// Relative IDX paths are resolved against this; set to the config's
    /// directory when loaded from a file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(main_train: DatasetSpec, main_test: DatasetSpec, anomaly_test: DatasetSpec) -> Self {
        Self {
            main_train,
            main_test,
            anomaly_train: None,
            anomaly_test,
            train: TrainConfig::default(),
            head: HeadConfig::default(),
            feature_tap: FeatureTap::default(),
            lambdas: default_lambdas(),
            seeds: default_seeds(),
            percentile: default_percentile(),
            tau: default_tau(),
            ridge: default_ridge(),
            out_dir: default_out_dir(),
            projection_limit: default_projection_limit(),
            save_archives: true,
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Output directory, resolved like the dataset paths.
    pub fn out_path(&self) -> PathBuf {
        resolve(&self.base_dir, &self.out_dir)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.lambdas.is_empty() {
            return Err(CliError::Config("lambdas must not be empty".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(CliError::Config(format!("lambda {l} must be finite and ≥ 0")));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(CliError::Config(format!("percentile {} outside (0, 1]", self.percentile)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(CliError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.ridge >= 0.0) {
            return Err(CliError::Config(format!("ridge {} must be ≥ 0", self.ridge)));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.head
            .validate()
            .map_err(|e| CliError::Config(format!("head: {e}")))?;
        let specs = [Some(&self.main_train), Some(&self.main_test), self.anomaly_train.as_ref(), Some(&self.anomaly_test)];
        for spec in specs.into_iter().flatten() {
            spec.check_paths(&self.base_dir)?;
        }
        Ok(())
    }

    /// Applies the `--lambda`, `--seed` and `--out` overrides.
    pub fn with_overrides(mut self, lambda: Option<f64>, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(l) = lambda {
            self.lambdas = vec![l];
        }
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(o) = out {
            // command-line paths are relative to the working directory
            self.out_dir = std::env::current_dir().map(|d| d.join(&o)).unwrap_or(o);
        }
        self
    }
}
