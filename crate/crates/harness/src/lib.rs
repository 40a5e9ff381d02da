//! Experiment orchestration for adaptive A/B allocation: configuration, the
//! per-seed simulation loop, baselines, ablations, metrics, checkpoints and
//! reports.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod replay;
pub mod replica;
pub mod report;
pub mod selftest;

pub use config::{AblationFlags, Method, Preset, RunConfig};
pub use error::{HarnessError, Result};
pub use experiment::{compare, run_ablation, run_experiment, ExperimentResult};
pub use metrics::{wilson_interval, MetricRow, MetricSeries};
pub use replica::Replica;
