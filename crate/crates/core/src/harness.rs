//! Experiment drivers, two-sample statistics, configuration and output
//! plumbing shared by the CLI and the acceptance suite.
//!
//! Every experiment is a pure function of its [`ExperimentSpec`], the model
//! and the root seed. Replicates run on the ambient rayon pool and are merged
//! by index, so the thread count never changes a result.

mod config;
mod experiments;
mod output;
mod stats;

pub use config::{Config, ConfigError};
pub use experiments::{
    averaging_experiment, chaos_experiment, lln_experiment, phase_portrait, sde_boundary_experiment, sde_paths, linear_level,
    AveragingReport, CheckpointRow, ChaosReport, ChaosRow, ExperimentKind, ExperimentSpec, LadderRow, LlnReport,
    OrbitRow, PhasePortrait, SdeBoundaryReport,
};
pub use output::{sha256_hex, with_threads, Manifest, OutputDir, RunStatus, THREADS_ENV};
pub use stats::{two_sample_stats, TwoSampleReport};

use thiserror::Error;

use crate::actionangle::ActionAngleError;
use crate::macroode::MacroError;
use crate::microsim::MicroError;
use crate::model::ModelError;
use crate::sdelimit::SdeError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid experiment settings: {0}")]
    BadSpec(String),
    #[error("two-sample statistics need non-empty samples")]
    EmptySample,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Macro(#[from] MacroError),
    #[error(transparent)]
    Micro(#[from] MicroError),
    #[error(transparent)]
    Orbit(#[from] ActionAngleError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
