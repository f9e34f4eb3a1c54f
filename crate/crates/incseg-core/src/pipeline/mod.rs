//! Experiment orchestration: configuration, the three-step stage runner,
//! and report emission.

pub mod config;
pub mod report;
pub mod trainer;

pub use config::{BaseTerm, ExperimentConfig, KdKind, KdScope, MethodSpec};
pub use trainer::{run_experiment, ExperimentResult, StageRecord, TimingRecord};
