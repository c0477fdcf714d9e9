//! Desk-scale semi-supervised domain adaptation by similarity-based
//! pseudo-label injection: contrastive and consistency losses, a
//! non-parametric soft pseudo-labeler with an EMA confidence store, an
//! epoch-wise dataset injection/removal state machine, and a fully
//! deterministic training loop over synthetic domain-shift tasks.

pub mod config;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod model;
pub mod pseudo;
pub mod sampling;
pub mod trainer;

pub use config::{InjectionInterval, LossMask, TrainConfig};
pub use datasets::{DatasetBundle, DomainShiftSpec, LabeledSet, SampleId, UnlabeledSet};
pub use error::{Result, SpiError};
pub use losses::{AnchorMode, LossWeights};
pub use math::{Embedding, ProbVector, Temperature};
pub use model::{ModelParams, Schedule};
pub use pseudo::PseudoLabelStore;
pub use trainer::{run, EpochReport, RunOutput, Trainer};
