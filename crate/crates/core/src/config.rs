//! Run configuration: one TOML file, one section per stage. Unknown keys
//! are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::dit::{BaseTrainConfig, DitConfig, StylizerTrainConfig};
use crate::encoder::{EncoderConfig, EncoderTrainConfig};
use crate::error::{Error, Result};
use crate::moe::MoeConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfig {
    pub max_in_flight: usize,
    pub min_iou: f64,
    pub max_style_distance: f64,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            min_iou: 0.5,
            max_style_distance: 0.5,
            timeout_secs: 30,
            retries: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Anchors drawn by the routing-overlap analysis.
    pub samples: usize,
    /// Seeds of the convergence comparison.
    pub ablation_seeds: Vec<u64>,
    /// Iterations at which median losses are reported.
    pub checkpoints: Vec<usize>,
    /// Trailing iterations averaged into each reported loss.
    pub loss_window: usize,
    /// Mock semantic judge threshold on encoder cosine distance.
    pub semantic_max_distance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            ablation_seeds: vec![1, 2, 3],
            checkpoints: vec![500, 1000, 2000],
            loss_window: 100,
            semantic_max_distance: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub stage1: EncoderTrainConfig,
    pub dit: DitConfig,
    pub base: BaseTrainConfig,
    pub moe: MoeConfig,
    pub stage2: StylizerTrainConfig,
    pub judge: JudgeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-sized profile used by default.
    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 42,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            stage1: EncoderTrainConfig {
                steps: 2000,
                ..EncoderTrainConfig::default()
            },
            dit: DitConfig::default(),
            base: BaseTrainConfig::default(),
            moe: MoeConfig::default(),
            stage2: StylizerTrainConfig {
                iterations: 2000,
                ..StylizerTrainConfig::default()
            },
            judge: JudgeConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Hyperparameters as published. Accepted, but far beyond a desk budget.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            stage1: EncoderTrainConfig {
                lr: 1e-5,
                batch_size: 128,
                steps: 3500,
                ..desk.stage1
            },
            stage2: StylizerTrainConfig {
                lr: 1e-4,
                iterations: 10_000,
                ..desk.stage2
            },
            moe: MoeConfig {
                num_experts: 16,
                top_k: 2,
                rank: 8,
                ..desk.moe
            },
            ..desk
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Version {
                found: self.version.to_string(),
                expected: CONFIG_VERSION.to_string(),
            });
        }
        self.data.validate()?;
        self.encoder.validate()?;
        self.stage1.validate()?;
        self.dit.validate()?;
        self.moe.validate()?;
        self.stage2.validate()?;
        if self.encoder.extractor.size != self.data.image_size || self.dit.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "encoder.extractor.size ({}) and dit.image_size ({}) must equal data.image_size ({})",
                self.encoder.extractor.size, self.dit.image_size, self.data.image_size
            )));
        }
        if self.dit.vocab < self.data.categories {
            return Err(Error::Config(format!(
                "dit.vocab ({}) is smaller than data.categories ({})",
                self.dit.vocab, self.data.categories
            )));
        }
        if self.judge.max_in_flight == 0 {
            return Err(Error::Config("judge.max_in_flight must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
