//! Configuration, stage orchestration, ablation sweeps and reports.

pub mod ablation;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use ablation::{run_ablation, AblationEntry, AblationReport, Axis};
pub use config::{parse_override_args, Cap, ExperimentConfig, TowerSpec, DEFAULT_RUN_ROOT, RUN_ROOT_ENV};
pub use manifest::{validate_artifact, RunManifest, Stage, StageRecord, StageStatus};
pub use pipeline::{run_pipeline, run_stages, run_stages_in, stage_artifacts, Accuracies, EvalSummary, Experiment};
