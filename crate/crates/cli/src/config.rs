//! Layered run configuration: built-in defaults, then a TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semgan::losses::{AdvForm, LossWeights, TaskLossWeights};
use semgan::nets::{DetectorConfig, DiscriminatorConfig, GeneratorConfig};
use semgan::pipeline::{DetectorStageConfig, ExperimentConfig, GanStageConfig, Method, TrainConfig};
use semgan::scenegen::{SceneSpec, StyleName};

use crate::CliError;

/// Environment variable overriding the output root.
pub const OUTPUT_ROOT_ENV: &str = "SEMGAN_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    /// Seed of single-stage commands.
    pub seed: u64,
    /// Seeds of the incremental experiment.
    pub experiment: Vec<u64>,
}

impl Default for SeedsSection {
    fn default() -> Self {
        Self { seed: 0, experiment: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenegenSection {
    pub canvas_size: usize,
    pub cluster_count_range: [usize; 2],
    pub cluster_radius_range: [f64; 2],
    pub berries_per_cluster_range: [usize; 2],
}

impl Default for ScenegenSection {
    fn default() -> Self {
        let s = SceneSpec::new(StyleName::Synthetic, 0);
        Self {
            canvas_size: s.canvas_size,
            cluster_count_range: s.cluster_count_range,
            cluster_radius_range: s.cluster_radius_range,
            berries_per_cluster_range: s.berries_per_cluster_range,
        }
    }
}

impl ScenegenSection {
    pub fn spec(&self, style: StyleName, seed: u64) -> SceneSpec {
        SceneSpec {
            canvas_size: self.canvas_size,
            cluster_count_range: self.cluster_count_range,
            cluster_radius_range: self.cluster_radius_range,
            berries_per_cluster_range: self.berries_per_cluster_range,
            ..SceneSpec::new(style, seed)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: Option<PathBuf>,
    pub target_unlabeled: Option<PathBuf>,
    pub target_labeled: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetsSection {
    pub detector: DetectorConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossesSection {
    pub lambda_c: f64,
    pub lambda_i: f64,
    pub lambda_t: f64,
    pub adv_form: AdvForm,
    pub task: TaskLossWeights,
}

impl Default for LossesSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { lambda_c: w.lambda_c, lambda_i: w.lambda_i, lambda_t: w.lambda_t, adv_form: w.adv_form, task: TaskLossWeights::default() }
    }
}

/// GAN schedule; architecture and loss weights live in their own sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSchedule {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub pool_size: usize,
    pub sample_every: usize,
    pub checkpoint_every: usize,
}

impl Default for GanSchedule {
    fn default() -> Self {
        let g = GanStageConfig::default();
        Self {
            steps: g.steps,
            lr: g.lr,
            beta1: g.beta1,
            batch_size: g.batch_size,
            pool_size: g.pool_size,
            sample_every: g.sample_every,
            checkpoint_every: g.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub valid_fraction: f64,
    pub pretrain: DetectorStageConfig,
    pub embed: DetectorStageConfig,
    pub finetune: DetectorStageConfig,
    pub finetune_include_real: bool,
    pub gan: GanSchedule,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            valid_fraction: t.valid_fraction,
            pretrain: t.pretrain,
            embed: t.embed,
            finetune: t.finetune,
            finetune_include_real: t.finetune_include_real,
            gan: GanSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub conf_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { conf_threshold: semgan::eval::DEFAULT_CONF_THRESHOLD, nms_threshold: semgan::eval::DEFAULT_NMS_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub k_list: Vec<usize>,
    pub methods: Vec<Method>,
    pub jobs: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { k_list: semgan::data::default_k_list(), methods: Method::ALL.to_vec(), jobs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: SeedsSection,
    pub scenegen: ScenegenSection,
    pub data: DataSection,
    pub nets: NetsSection,
    pub losses: LossesSection,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: SeedsSection::default(),
            scenegen: ScenegenSection::default(),
            data: DataSection::default(),
            nets: NetsSection::default(),
            losses: LossesSection::default(),
            pipeline: PipelineSection::default(),
            eval: EvalSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Core(semgan::Error::Io { path: p.into(), source: e }))?;
                Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Output root: explicit override, then the environment, then the file.
    pub fn resolve_output_root(&mut self, flag: Option<&Path>) {
        if let Some(p) = flag {
            self.output_dir = p.to_path_buf();
        } else if let Some(env) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(env);
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_c: self.losses.lambda_c,
            lambda_i: self.losses.lambda_i,
            lambda_t: self.losses.lambda_t,
            adv_form: self.losses.adv_form,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let p = &self.pipeline;
        TrainConfig {
            seed,
            detector: self.nets.detector.clone(),
            valid_fraction: p.valid_fraction,
            pretrain: p.pretrain.clone(),
            embed: p.embed.clone(),
            finetune: p.finetune.clone(),
            finetune_include_real: p.finetune_include_real,
            gan: GanStageConfig {
                steps: p.gan.steps,
                lr: p.gan.lr,
                beta1: p.gan.beta1,
                batch_size: p.gan.batch_size,
                pool_size: p.gan.pool_size,
                weights: self.loss_weights(),
                task: self.losses.task,
                generator: self.nets.generator.clone(),
                discriminator: self.nets.discriminator.clone(),
                sample_every: p.gan.sample_every,
                checkpoint_every: p.gan.checkpoint_every,
            },
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            k_list: self.experiment.k_list.clone(),
            methods: self.experiment.methods.clone(),
            seeds: self.seeds.experiment.clone(),
            train: self.train_config(self.seeds.seed),
            conf_threshold: self.eval.conf_threshold,
            nms_threshold: self.eval.nms_threshold,
            jobs: self.experiment.jobs,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scenegen.spec(StyleName::Synthetic, 0).validate()?;
        self.train_config(self.seeds.seed).validate()?;
        for (name, v) in [("eval.conf_threshold", self.eval.conf_threshold), ("eval.nms_threshold", self.eval.nms_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(semgan::Error::validation(name, "must lie in [0, 1]").into());
            }
        }
        Ok(())
    }
}
