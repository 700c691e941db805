//! Frozen diffusion-backbone features as a classifier, and the adversarial
//! attacks used to measure how robust that classifier is.
//!
//! The pieces compose in this order: [`schedule`] noises a clean image to a
//! timestep, [`backbone`] runs the frozen U-Net and taps one block,
//! [`backbone::pool_flatten`] reduces the map to a `k×k` grid, and a
//! [`heads::ProbeHead`] classifies the result. [`pipeline::DiffusionClassifier`]
//! joins them into a differentiable [`attacks::Classifier`].

pub mod attacks;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod heads;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod schedule;
pub mod tensor;

pub use attacks::{AttackConfig, AttackKind, AttackOutcome, Classifier, Norm, SampleOutcome, ThreatModel};
pub use backbone::{BackboneCheckpoint, BlockDescriptor, ProbeSpec, UNetConfig};
pub use data::{LabeledImageSet, Split};
pub use error::{Error, Result};
pub use heads::{HeadKind, HeadTrainConfig, ProbeHead};
pub use parallel::Parallelism;
pub use pipeline::DiffusionClassifier;
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use tensor::Tensor;
