//! Monte Carlo harness for the dpgne solvers: configuration, trial
//! orchestration, and CSV export. The `dpgne` binary wraps it.

pub mod config;
pub mod error;
pub mod export;
pub mod runner;

pub use config::{ArmKind, ExperimentConfig, NoiseMode};
pub use error::{ExperimentError, Result};
pub use runner::{ArmPlan, ArmResult, Study, TrialOutcome, TrialRecord, run_monte_carlo, run_study, run_trial};
