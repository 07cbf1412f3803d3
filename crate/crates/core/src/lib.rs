//! Semantically constrained image translation for sim-to-real object detection.
//!
//! Two unpaired domains (a labeled synthetic source and an unlabeled target)
//! are bridged by a cycle-consistent GAN whose generator is additionally
//! penalised by a frozen, target-aware detector. Translated source images
//! keep their labels and are used to fine-tune the detector.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*32`/`*64` aliases below fix the scalar for callers.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nets;
pub mod pipeline;
pub mod scalar;
pub mod scenegen;
pub mod tape;
pub mod tensor;

pub use data::{BoundingBox, LabeledImage, SplitSchedule};
pub use error::{Error, Result};
pub use nets::{ArchConfig, DetectorConfig, DiscriminatorConfig, GeneratorConfig, NetKind, NetworkHandle};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = NetworkHandle<f32>;
pub type Network64 = NetworkHandle<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type LabeledImage32 = LabeledImage<f32>;
pub type LabeledImage64 = LabeledImage<f64>;
