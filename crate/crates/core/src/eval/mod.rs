//! Zero-shot prompted evaluation by rank classification.

pub mod report;
pub mod score;
pub mod task;

pub use report::{aggregate, evaluate, random_baseline, AggregationPolicy, EvalReport, TaskResult};
pub use score::{rank_classify, score_candidate, score_candidate_tokens, ScoringPolicy};
pub use task::{render, toy_task, toy_task_suite, EvalExample, EvalTask, ToyTaskKind};
