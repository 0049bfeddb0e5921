//! Configuration, persistence and experiment orchestration.

pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod report;

pub use checkpoint::{load_model, load_scorer, save_model, save_scorer, ModelCheckpoint, ScorerCheckpoint};
pub use config::{DataSource, EvalConfig, RunConfig};
pub use pipeline::{run_pipeline, run_suite, Method, PipelineOutcome, Suite};
pub use report::{Comparison, Report, RunManifest};
