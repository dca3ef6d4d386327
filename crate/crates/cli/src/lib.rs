//! Library surface of the experiment runner, kept separate from the binary
//! so integration and acceptance tests can drive runs in-process.

pub mod matrix;
pub mod report;
pub mod run;
pub mod spec;

use std::path::Path;

use tlab_core::error::Result;
use tlab_core::eval::{evaluate, AggregationPolicy, EvalReport, EvalTask, ScoringPolicy};

pub use matrix::{cmd_matrix, MatrixSpec, FULL_MATRIX};
pub use report::cmd_report;
pub use run::{cmd_run, RunManifest};
pub use spec::ExperimentSpec;

/// Evaluates an existing checkpoint file against task files.
pub fn cmd_eval(
    checkpoint: &Path,
    task_paths: &[std::path::PathBuf],
    policy: AggregationPolicy,
    scoring: ScoringPolicy,
    max_len: usize,
) -> Result<EvalReport> {
    let ck = tlab_core::trainer::load(checkpoint)?;
    let tasks: Vec<EvalTask> = task_paths
        .iter()
        .map(EvalTask::load)
        .collect::<Result<_>>()?;
    evaluate(&ck, &tasks, policy, scoring, max_len)
}

/// Checkpoint metadata as pretty JSON.
pub fn cmd_inspect(checkpoint: &Path) -> Result<String> {
    let ck = tlab_core::trainer::load(checkpoint)?;
    let value = serde_json::json!({
        "meta": ck.meta,
        "stage_labels": ck.stage_labels(),
        "parameter_count": ck.params.total_count(),
        "has_optimizer_state": ck.optimizer_state.is_some(),
    });
    Ok(serde_json::to_string_pretty(&value)?)
}
