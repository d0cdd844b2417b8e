//! Experiment manifests, stage execution and run comparison.

pub mod compare;
pub mod manifest;
pub mod run;

pub use compare::{compare, markdown_table, Comparison};
pub use manifest::{ExperimentManifest, GenerationBackend, PipelineKind, Regime};
pub use run::{run, run_until, RunRecord, StageGraph, StageId};
