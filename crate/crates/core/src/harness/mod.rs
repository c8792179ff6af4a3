//! Experiment orchestration: TOML configuration, the staged pipeline with
//! its on-disk artifacts and manifest, and the command-line front end.

pub mod cli;
mod config;
mod pipeline;
mod svg;

pub use config::{DatasetConfig, EvaluationConfig, ExperimentConfig, SourceConfig, TargetConfig, ValidationConfig};
pub use pipeline::{
    attack_table, run_pipeline, ArtifactRecord, AttackMetrics, Lab, OsloRun, RunManifest, StageRecord, Summary,
    TrainedModels, BASELINES,
};
pub use svg::roc_svg;
