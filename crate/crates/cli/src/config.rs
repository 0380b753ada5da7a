//! Run configuration: a TOML file, overridden by command-line flags.
//!
//! ```toml
//! seed = 7
//! workers = 1
//!
//! [data]
//! synth = true
//! synth_count = 200
//!
//! [train]
//! loss = "iou"
//! max_epochs = 60
//! ```
//!
//! Every section is optional and every key has a default. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use boxreg::datasets::SynthConfig;
use boxreg::metrics::DEFAULT_K_GRID;
use boxreg::{LossConfig, ProposalConfig, SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// COCO-style annotation file.
    pub annotations: Option<PathBuf>,
    /// Binary scene cache written by `boxreg synth`.
    pub scenes: Option<PathBuf>,
    /// Generate scenes from the `[synth]` section.
    pub synth: bool,
    pub synth_count: usize,
    /// Images containing any of these categories are dropped.
    pub exclude_categories: Vec<i64>,
    /// Rescale annotation coordinates so the shorter image side has this length.
    pub rescale_short_side: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            annotations: None,
            scenes: None,
            synth: false,
            synth_count: 200,
            exclude_categories: vec![],
            rescale_short_side: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5, 0.7],
            k: DEFAULT_K_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of `[synth]` and `[train]` and seeds box perturbation.
    pub seed: Option<u64>,
    /// Threads used for per-scene work in refine, propose and eval.
    pub workers: usize,
    /// Proposals kept per image by `propose`.
    pub max_proposals: usize,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub proposals: ProposalConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            workers: 1,
            max_proposals: 1000,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            proposals: ProposalConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Propagate the global seed and check every section.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.train.seed = seed;
        }
        if self.workers == 0 {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        if self.max_proposals == 0 {
            return Err(CliError::Usage("max_proposals must be at least 1".into()));
        }
        if self.eval.k.contains(&0) {
            return Err(CliError::Usage("proposal budgets must be at least 1".into()));
        }
        self.synth.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.proposals.grid.validate()?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
