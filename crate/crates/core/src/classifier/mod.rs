//! Fusion MLP classifier, focal-loss training and MC-dropout triage.

pub mod checkpoint;
pub mod loss;
pub mod mcd;
pub mod model;
pub mod train;

use thiserror::Error;

use crate::preprocess::PreprocessError;

pub use loss::{argmax, focal_loss, focal_loss_grad, softmax};
pub use mcd::{
    calibrate_threshold, calibration_from_scores, classify, diagnose, mc_dropout_predict, quantile,
    Calibration, DiagnosisResult, MCDResult, McdConfig, UncertaintyReduction,
};
pub use model::{fuse, ClassifierModel, Dense, DropoutMasks, Gradients, ModelConfig};
pub use train::{train, EpochRecord, TrainingConfig, TrainingHistory, TrainingProfile};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("model config: {0}")]
    Config(String),
    #[error("input has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target class {target} out of range for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },
    #[error("training diverged at step {step}: non-finite loss or parameters")]
    Diverged { step: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("number of MC passes must be >= 1, got {0}")]
    InvalidPasses(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}
