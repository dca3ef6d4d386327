//! Accuracy aggregation, spread, and random baselines.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::eval::score::{rank_classify, ScoringPolicy};
use crate::eval::task::EvalTask;
use crate::trainer::checkpoint::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationPolicy {
    /// Median accuracy over prompts per task, then mean across tasks
    /// (multi-prompt benchmark style).
    MedianThenMean,
    /// Mean across tasks of the first prompt's accuracy (single-prompt
    /// benchmark style).
    SinglePromptMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub name: String,
    /// Accuracy per prompt.
    pub per_prompt: Vec<f64>,
    /// (min, max) over prompts.
    pub spread: (f64, f64),
    pub chance_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    pub policy: AggregationPolicy,
    /// Aggregate under `policy`.
    pub aggregate: f64,
    pub aggregate_median_then_mean: f64,
    pub aggregate_single_prompt_mean: f64,
    pub random_baseline: f64,
    pub scoring_policy: ScoringPolicy,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates a per-task × per-prompt accuracy matrix.
pub fn aggregate(matrix: &[Vec<f64>], policy: AggregationPolicy) -> Result<f64> {
    if matrix.is_empty() || matrix.iter().any(|row| row.is_empty()) {
        return Err(LabError::Validation("empty accuracy matrix".into()));
    }
    let per_task: Vec<f64> = match policy {
        AggregationPolicy::MedianThenMean => matrix.iter().map(|row| median(row)).collect(),
        AggregationPolicy::SinglePromptMean => matrix.iter().map(|row| row[0]).collect(),
    };
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Aggregate of per-task chance levels under a policy. Chance is constant
/// across prompts, so both policies reduce to the mean over tasks. Errors if
/// any task lacks a defined chance level.
pub fn random_baseline(tasks: &[EvalTask], _policy: AggregationPolicy) -> Result<f64> {
    if tasks.is_empty() {
        return Err(LabError::Validation("no tasks for baseline".into()));
    }
    for t in tasks {
        if t.chance_level.is_none() && t.examples.is_empty() {
            return Err(LabError::Validation(format!(
                "task {} has no defined chance level",
                t.name
            )));
        }
    }
    Ok(tasks.iter().map(|t| t.chance()).sum::<f64>() / tasks.len() as f64)
}

/// Runs rank classification for every (task, prompt) pair and assembles the
/// full report. Evaluating the same checkpoint twice yields identical
/// reports.
pub fn evaluate(
    ck: &Checkpoint,
    tasks: &[EvalTask],
    policy: AggregationPolicy,
    scoring: ScoringPolicy,
    max_len: usize,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(LabError::Validation("no tasks to evaluate".into()));
    }
    let mut results = Vec::with_capacity(tasks.len());
    let mut matrix = Vec::with_capacity(tasks.len());
    for task in tasks {
        let per_prompt: Vec<f64> = (0..task.prompts.len())
            .map(|p| rank_classify(ck, task, p, scoring, max_len))
            .collect::<Result<_>>()?;
        let min = per_prompt.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = per_prompt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        results.push(TaskResult {
            name: task.name.clone(),
            per_prompt: per_prompt.clone(),
            spread: (min, max),
            chance_level: task.chance(),
        });
        matrix.push(per_prompt);
    }
    let mtm = aggregate(&matrix, AggregationPolicy::MedianThenMean)?;
    let spm = aggregate(&matrix, AggregationPolicy::SinglePromptMean)?;
    Ok(EvalReport {
        tasks: results,
        policy,
        aggregate: match policy {
            AggregationPolicy::MedianThenMean => mtm,
            AggregationPolicy::SinglePromptMean => spm,
        },
        aggregate_median_then_mean: mtm,
        aggregate_single_prompt_mean: spm,
        random_baseline: random_baseline(tasks, policy)?,
        scoring_policy: scoring,
    })
}
