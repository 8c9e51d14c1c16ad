//! Configuration-driven experiments: single runs, sweeps, GD-vs-CV
//! comparisons and analysis of the resulting CSV files.

pub mod analyze;
pub mod compare;
pub mod config;
pub mod report;
pub mod sweep;
pub mod trainer;

pub use analyze::{analyze, Analysis, CorrelationRow};
pub use compare::{compare_gd_vs_cv, CompareReport, Method};
pub use config::{ExperimentConfig, Monitor, SweepAxis};
pub use report::{write_run_csv, RUN_HEADER};
pub use sweep::{run_sweep, SweepReport};
pub use trainer::{prepare_data, run_training, train_on, RunResult, Splits, Termination};
