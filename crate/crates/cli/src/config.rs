//! Run configuration: task, model, data source and optimizer settings.

use std::path::{Path, PathBuf};

use nfm_core::data::{SpikeSpec, SynthSpec};
use nfm_core::layers::{HeadSpec, ModelConfig};
use nfm_core::tasks::{TaskKind, TaskSpec};
use nfm_core::{NfmError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where the series or labelled samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Labelled band-limited class signals.
    Synth {
        #[serde(default)]
        spec: SynthSpec,
        /// Train/val/test fractions of a seeded shuffle.
        #[serde(default = "default_class_split")]
        split: [f64; 3],
    },
    /// A generated sum-of-sinusoids series, optionally with spike anomalies.
    Sinusoid {
        len: usize,
        #[serde(default = "one")]
        channels: usize,
        /// `(period in samples, amplitude)` pairs.
        components: Vec<(f64, f64)>,
        #[serde(default)]
        noise_std: f64,
        #[serde(default)]
        spikes: Option<SpikeSpec>,
        /// When set, spikes are injected in the training split too.
        #[serde(default = "yes")]
        spikes_in_train: bool,
        #[serde(default = "default_series_split")]
        split: [f64; 3],
        #[serde(default = "one")]
        stride: usize,
    },
    /// Header-first CSV with an optional leading timestamp column.
    Csv {
        path: PathBuf,
        #[serde(default)]
        columns: Option<Vec<String>>,
        #[serde(default = "default_series_split")]
        split: [f64; 3],
        #[serde(default = "one")]
        stride: usize,
    },
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_class_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}
fn default_series_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate of a cosine schedule; constant `lr` when absent.
    #[serde(default)]
    pub lr_min: Option<f64>,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Hard cap on optimizer steps per epoch.
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
    /// Wall-clock budget for training, in seconds.
    #[serde(default)]
    pub time_budget_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub data: DataSource,
    pub optim: OptimConfig,
    /// Model input window length `N` (before any decimation).
    pub window: usize,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(&serde_json::to_value(self).expect("config serializes"))
            .expect("value serializes");
        hex::encode(&Sha256::digest(canon)[..8])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(self.window)?;
        let o = &self.optim;
        if o.batch == 0 || !(o.lr > 0.0) || o.lr_min.is_some_and(|m| !(m >= 0.0)) {
            return Err(NfmError::invalid("optim: batch and lr must be positive"));
        }
        match (self.task.kind, self.model.head) {
            (TaskKind::Classify { n_classes }, HeadSpec::Pooled { classes }) if classes == n_classes => {}
            (TaskKind::Forecast { .. } | TaskKind::Anomaly { .. }, HeadSpec::PerStep { out })
                if out == self.model.c_in => {}
            (kind, head) => {
                return Err(NfmError::invalid(format!(
                    "model head {head:?} does not fit task {kind:?}"
                )))
            }
        }
        match (&self.data, self.task.kind) {
            (DataSource::Synth { spec, .. }, TaskKind::Classify { n_classes }) => {
                spec.validate()?;
                if spec.classes != n_classes || spec.len != self.window {
                    return Err(NfmError::invalid(
                        "synth data must match task.n_classes and window",
                    ));
                }
            }
            (DataSource::Synth { .. }, _) | (_, TaskKind::Classify { .. }) => {
                return Err(NfmError::invalid(
                    "classification runs on synth data; series tasks need a series source",
                ))
            }
            _ => {}
        }
        if self.model.c_in != 1 {
            // Series tasks are channel independent and the synth set is univariate.
            return Err(NfmError::invalid("model.c_in must be 1"));
        }
        Ok(())
    }
}

/// Published JSON schema for [`RunConfig`].
pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");
