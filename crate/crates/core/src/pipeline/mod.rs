//! The four training stages, the translation training loop and the
//! incremental-label experiment runner.

mod config;
mod detector;
mod experiment;
mod gan;
mod optim;
mod pool;

pub use config::{config_hash, DetectorStageConfig, GanStageConfig, TrainConfig};
pub use detector::{
    detection_loss_on, embed_domain_knowledge, finetune_on_generated, pretrain_detector, require_predecessor,
    split_indices, train_detector, CurvePoint, StageOutput, STAGE_EMBED, STAGE_FINETUNE, STAGE_PRETRAIN,
    STAGE_TRAIN_GAN,
};
pub use experiment::{
    audit_test_overlap, run_incremental_experiment, ExperimentConfig, ExperimentData, ExperimentResult, ExperimentRow,
    MedianRow, Method,
};
pub use gan::{
    train_semgan, translate_dataset, triptych, write_translated, GanNets, GanOutput, StepLog, TranslatedEntry,
    TranslatedManifest,
};
pub use optim::{linear_decay_lr, Adam};
pub use pool::ImagePool;
