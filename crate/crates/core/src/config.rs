//! One declarative configuration covering every stage of a run.

use serde::{Deserialize, Serialize};

use crate::embedding::PretrainConfig;
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::metrics::EvalConfig;
use crate::model::{ModelConfig, TrainConfig};
use crate::neighbors::DEFAULT_DELTA;
use crate::page::BinarizeConfig;
use crate::synth::LayoutSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Neighbor expansion radius in pixels.
    pub delta_neighbor: u32,
    pub binarize: BinarizeConfig,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: LayoutSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            delta_neighbor: DEFAULT_DELTA,
            binarize: BinarizeConfig::default(),
            grid: GridConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: LayoutSpec::default(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be positive, got {v}")))
    }
}

fn nonnegative(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be nonnegative, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.model.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        positive("pretrain.lr", self.pretrain.lr)?;
        if !(0.0..=1.0).contains(&self.pretrain.lr_floor) {
            return Err(Error::Config(format!(
                "pretrain.lr_floor must be in [0, 1], got {}",
                self.pretrain.lr_floor
            )));
        }
        nonnegative("pretrain.weight_decay", self.pretrain.weight_decay)?;
        positive("pretrain.batch_pages", self.pretrain.batch_pages as f64)?;
        positive("pretrain.k_neg", self.pretrain.k_neg as f64)?;
        positive("train.lr", self.train.lr)?;
        nonnegative("train.weight_decay", self.train.weight_decay)?;
        positive("train.batch_pages", self.train.batch_pages as f64)?;
        Ok(())
    }
}
