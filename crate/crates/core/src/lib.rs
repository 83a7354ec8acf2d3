//! Uncertainty-aware symptom classification with evidence retrieval and
//! rule-based treatment safety screening.

pub mod classifier;
pub mod domain;
pub mod exec;
pub mod generation;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod retrieval;
pub mod safety;

pub use exec::Exec;
