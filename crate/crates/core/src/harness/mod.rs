//! Experiment configuration, orchestration, run ledger and reports.

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod ledger;
pub mod report;

pub use commands::{threads_from_env, DataSummary, Runner, THREADS_ENV};
pub use config::{hash_json, EvalSettings, ExperimentConfig, Method, PretrainSettings};
pub use ledger::{Ledger, RunRecord};
pub use report::{Report, ReportRow};
