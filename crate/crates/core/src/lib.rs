//! Modality-gap analysis toolkit: contrastive and gap-closing losses, embedding
//! space metrics, clustering evaluation, synthetic multimodal data and a small
//! MLP trainer, plus the experiment drivers built on top of them.

pub mod clustering;
pub mod error;
pub mod experiments;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{InfoNceStructure, LossConfig, LossValueAndGrad, TempMode};
pub use metrics::{GapReport, ShiftSpec};
pub use numerics::{Matrix, MultimodalBatch, Rng};
pub use trainer::{LossVariant, TrainConfig};
