//! Multitask prompted finetuning.

use rand::Rng;

use crate::data::pack::{pack_prompted, token_accounting};
use crate::error::{LabError, Result};
use crate::model::forward::{loss_and_grads, Mode};
use crate::model::loss::Z_LOSS_COEFF;
use crate::optim::{adafactor_step, lr_at, OptimizerState};
use crate::rng::{subseed, substream};
use crate::trainer::checkpoint::{Checkpoint, StageSummary};
use crate::trainer::stage::{BudgetLedger, MetricsSink, StageKind, StepMetrics, TrainingStage};

/// One rendered supervised example: prompt text in, answer text out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedPair {
    pub input: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinetuneTask {
    pub name: String,
    pub pairs: Vec<PromptedPair>,
}

/// Mixture sampling weights are example counts capped per task.
#[derive(Debug, Clone)]
pub struct TaskMixture {
    pub tasks: Vec<FinetuneTask>,
    pub per_task_cap: usize,
}

impl TaskMixture {
    fn weights(&self) -> Vec<usize> {
        self.tasks
            .iter()
            .map(|t| t.pairs.len().min(self.per_task_cap))
            .collect()
    }
}

const MAX_SKIP_FRAC: f64 = 0.10;

/// Finetunes on prompted pairs sampled proportionally to capped task sizes.
/// Inputs become conditioning (prefix or encoder stream per the checkpoint's
/// architecture); loss lands only on target tokens. Examples that render
/// longer than seq_len are skipped and counted; more than 10% skipped is an
/// error.
pub fn multitask_finetune(
    start: &Checkpoint,
    mixture: &TaskMixture,
    stage: &TrainingStage,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    if !matches!(stage.objective, StageKind::MultitaskFinetune) {
        return Err(LabError::InvalidConfig(
            "multitask_finetune requires a MultitaskFinetune stage".into(),
        ));
    }
    if stage.arch != start.meta.arch {
        return Err(LabError::WrongLineage {
            expected: stage.arch.label().to_string(),
            found: start.meta.arch.label().to_string(),
        });
    }
    if mixture.tasks.is_empty() || mixture.tasks.iter().all(|t| t.pairs.is_empty()) {
        return Err(LabError::InsufficientData("empty task mixture".into()));
    }
    let weights = mixture.weights();
    let total_weight: usize = weights.iter().sum();
    if total_weight == 0 {
        return Err(LabError::InsufficientData("all tasks capped to zero".into()));
    }
    let vocab = start.meta.vocab;
    let rows = (stage.tokens_per_batch / stage.seq_len).max(1);

    let mut ck = start.clone();
    let mut cfg = ck.meta.config.clone();
    cfg.dropout_rate = stage.dropout;
    let arch = ck.forward_arch();
    if ck.meta.empty_encoder {
        return Err(LabError::InvalidConfig(
            "multitask finetuning of empty-encoder conversions is not supported".into(),
        ));
    }
    let mut opt_state = OptimizerState::new();
    let mut ledger = BudgetLedger::default();
    let mut sampled = 0u64;
    let mut skipped = 0u64;

    let mut step = 0u64;
    while ledger.tokens_seen < stage.token_budget_seen {
        let mut rng = substream(stage.seed, "mtf-sample", step);
        let mut pairs = Vec::with_capacity(rows);
        let mut guard = 0usize;
        while pairs.len() < rows {
            guard += 1;
            if guard > rows * 100 {
                return Err(LabError::TooManySkipped {
                    skipped: skipped as usize,
                    total: sampled as usize,
                });
            }
            let mut pick = rng.gen_range(0..total_weight);
            let mut task_idx = 0;
            for (i, w) in weights.iter().enumerate() {
                if pick < *w {
                    task_idx = i;
                    break;
                }
                pick -= w;
            }
            let task = &mixture.tasks[task_idx];
            let capped = task.pairs.len().min(mixture.per_task_cap);
            let pair = &task.pairs[rng.gen_range(0..capped)];
            sampled += 1;
            let input = vocab.tokenize(pair.input.as_bytes());
            let target = vocab.tokenize(pair.target.as_bytes());
            let fits = !input.is_empty()
                && !target.is_empty()
                && input.len() + target.len() <= stage.seq_len;
            if fits {
                pairs.push((input, target));
            } else {
                skipped += 1;
                if skipped as f64 > MAX_SKIP_FRAC * sampled as f64 && sampled >= 20 {
                    return Err(LabError::TooManySkipped {
                        skipped: skipped as usize,
                        total: sampled as usize,
                    });
                }
            }
        }
        let batch = pack_prompted(&pairs, arch, stage.seq_len)?;
        let acc = token_accounting(&batch);
        let dropout_seed = subseed(stage.seed, "mtf-dropout", step);
        let (loss, grads) = loss_and_grads(
            &ck.params,
            &cfg,
            arch,
            &batch,
            Mode::Train,
            dropout_seed,
            Z_LOSS_COEFF,
        )?;
        if !loss.total().is_finite() {
            sink.on_abort(&ck);
            return Err(LabError::NonFiniteLoss {
                step: step as usize,
                what: format!("ce={} z={}", loss.cross_entropy, loss.z_loss),
            });
        }
        adafactor_step(&mut ck.params, &grads, &mut opt_state, stage.schedule)?;
        ledger.steps += 1;
        ledger.tokens_seen += acc.tokens_seen as u64;
        ledger.tokens_trained += acc.tokens_trained as u64;
        sink.on_step(&StepMetrics {
            step,
            lr: lr_at(stage.schedule, opt_state.step),
            cross_entropy: loss.cross_entropy,
            z_loss: loss.z_loss,
            tokens_seen: ledger.tokens_seen,
            tokens_trained: ledger.tokens_trained,
            mean_abs_log_z: loss.mean_abs_log_z,
        });
        step += 1;
    }

    ck.optimizer_state = Some(opt_state);
    ck.meta.objective = Some("MTF".into());
    ck.meta.cumulative_tokens_seen = start.meta.cumulative_tokens_seen + ledger.tokens_seen;
    ck.meta.cumulative_tokens_trained =
        start.meta.cumulative_tokens_trained + ledger.tokens_trained;
    ck.meta.stage_history.push(StageSummary {
        arch: stage.arch,
        objective: "MTF".into(),
        tokens_seen: ledger.tokens_seen,
        tokens_trained: ledger.tokens_trained,
        steps: ledger.steps,
        final_val_loss: None,
    });
    Ok(ck)
}
