//! Class activation maps with shared-feature calibration, evaluated on a
//! synthetic long-tailed multi-label world.
//!
//! Scenes are built from an orthonormal feature basis so every learned
//! weight can be split exactly into class-specific and shared parts.

pub mod bench;
pub mod camgen;
pub mod classifier;
pub mod codec;
pub mod error;
pub mod numerics;
pub mod sfc;
pub mod synthworld;

pub use camgen::{ActivationStack, PrototypeSet, StackKind};
pub use classifier::{ClassifierState, GradientBundle};
pub use error::{Error, Result};
pub use numerics::{FeatureMap, LabelMap, ScalarMap};
pub use sfc::{ExperimentConfig, TrainConfig};
pub use synthworld::{Dataset, LongTailSpec, SyntheticScene};
