use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, TaskLossWeights};
use crate::nets::{hex_digest, DetectorConfig, DiscriminatorConfig, GeneratorConfig};

/// One detector training stage (pretrain, embed or fine-tune).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorStageConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub batch_size: usize,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Stop after this many validations without improvement; 0 disables.
    pub patience: usize,
    pub flip_prob: f64,
}

impl Default for DetectorStageConfig {
    fn default() -> Self {
        Self { steps: 1500, lr: 1e-3, beta1: 0.9, batch_size: 8, eval_every: 100, patience: 0, flip_prob: 0.5 }
    }
}

impl DetectorStageConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let f = |name: &str| format!("{prefix}.{name}");
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(f("lr"), "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::validation(f("beta1"), "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation(f("batch_size"), "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::validation(f("eval_every"), "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::validation(f("flip_prob"), "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The generator/discriminator training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanStageConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub pool_size: usize,
    pub weights: LossWeights,
    pub task: TaskLossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Sample triptych cadence in steps; 0 writes only the final one.
    pub sample_every: usize,
    /// Checkpoint cadence in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for GanStageConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 2e-4,
            beta1: 0.5,
            batch_size: 1,
            pool_size: 50,
            weights: LossWeights::default(),
            task: TaskLossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            sample_every: 200,
            checkpoint_every: 0,
        }
    }
}

impl GanStageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("gan.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::validation("gan.beta1", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("gan.batch_size", "must be positive"));
        }
        if self.generator.width == 0 {
            return Err(Error::validation("gan.generator.width", "must be positive"));
        }
        if self.discriminator.width == 0 || self.discriminator.downsamples == 0 {
            return Err(Error::validation("gan.discriminator", "width and downsamples must be positive"));
        }
        self.weights.validate()
    }
}

/// Hyperparameters of the whole four-stage pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub detector: DetectorConfig,
    /// Fraction of the source set held out for model selection during
    /// pretraining; 0 selects on the training images themselves.
    pub valid_fraction: f64,
    pub pretrain: DetectorStageConfig,
    pub embed: DetectorStageConfig,
    pub finetune: DetectorStageConfig,
    /// Also train on the `a` real labeled target images in the last stage.
    pub finetune_include_real: bool,
    pub gan: GanStageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            detector: DetectorConfig::default(),
            valid_fraction: 0.2,
            pretrain: DetectorStageConfig::default(),
            embed: DetectorStageConfig { steps: 300, lr: 5e-4, eval_every: 20, ..DetectorStageConfig::default() },
            finetune: DetectorStageConfig { steps: 600, lr: 5e-4, eval_every: 50, ..DetectorStageConfig::default() },
            finetune_include_real: false,
            gan: GanStageConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::validation("valid_fraction", "must lie in [0, 1)"));
        }
        if self.detector.width == 0 || self.detector.num_classes == 0 {
            return Err(Error::validation("detector", "width and num_classes must be positive"));
        }
        self.pretrain.validate("pretrain")?;
        self.embed.validate("embed")?;
        self.finetune.validate("finetune")?;
        self.gan.validate()
    }
}

/// SHA-256 of a value's JSON serialization.
pub fn config_hash<C: Serialize>(cfg: &C) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    hex_digest(h)
}
