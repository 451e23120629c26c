//! Instance-FPR penalty loss: margin-softmax training with a false positive
//! rate consistency term, and fairness evaluation over demographic groups.

// `!(x > 0.0)` guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod synthdata;
pub mod thresholding;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LogitsBatch, LossConfig, LossKind, LossOutput, PenaltyState};
pub use metrics::{FairnessReport, GroupedScores};
pub use numerics::{Matrix, Rng};
pub use synthdata::{Dataset, GroupSpec};
pub use thresholding::ThresholdEstimate;
pub use trainer::{TrainConfig, TrainState, TelemetryRecord};
