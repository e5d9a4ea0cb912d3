//! Experiment orchestration: configuration, checkpoints, runs, reports and
//! the acceptance suite.

pub mod acceptance;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod pipeline;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelState};
pub use config::{fingerprint, ConceptPair, ExperimentConfig};
pub use pipeline::{run_experiment, run_one, Artifacts, RunOutcome, RunSpec};
