//! Stage execution: the pretrain/adapt loop with exact seen-token budgeting.

use serde::{Deserialize, Serialize};

use crate::data::batch::{EncoderStreams, ObjectiveKind, PackedBatch};
use crate::data::corpus::Corpus;
use crate::data::corrupt::{corrupt_spans, raw_len_for_budget};
use crate::data::pack::{make_mlm_batch, pack_flm, pack_plm, pack_plm_encdec, token_accounting};
use crate::data::vocab::{Vocab, EOS_ID};
use crate::error::{LabError, Result};
use crate::model::config::ArchitectureKind;
use crate::model::forward::{loss_and_grads, Mode};
use crate::model::loss::Z_LOSS_COEFF;
use crate::optim::{adafactor_step, lr_at, LrSchedule, OptimizerState};
use crate::rng::{subseed, substream};
use crate::trainer::checkpoint::{Checkpoint, StageSummary};

/// Fraction of the corpus stream held out for validation.
pub const HOLDOUT_FRAC: f64 = 0.02;
/// Validation cadence: every 5% of the stage budget.
pub const VALIDATION_FRAC: f64 = 0.05;
const VAL_BATCHES: usize = 2;
/// Validation batches derive from this fixed seed so runs with the same
/// corpus and geometry share an identical validation set.
const VAL_SEED: u64 = 0x76616c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StageKind {
    Pretrain { objective: ObjectiveKind },
    MultitaskFinetune,
}

impl StageKind {
    pub fn label(&self) -> &'static str {
        match self {
            StageKind::Pretrain { objective } => objective.label(),
            StageKind::MultitaskFinetune => "MTF",
        }
    }
}

/// One (architecture, objective, budget) leg of a training pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStage {
    pub arch: ArchitectureKind,
    pub objective: StageKind,
    /// Stage ends exactly when its seen-token ledger reaches this.
    pub token_budget_seen: u64,
    pub tokens_per_batch: usize,
    pub seq_len: usize,
    pub schedule: LrSchedule,
    pub dropout: f64,
    pub seed: u64,
}

impl TrainingStage {
    pub fn label(&self) -> String {
        format!("{}:{}", self.arch.label(), self.objective.label())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub tokens_seen: u64,
    pub tokens_trained: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub cross_entropy: f64,
    pub z_loss: f64,
    pub tokens_seen: u64,
    pub tokens_trained: u64,
    pub mean_abs_log_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: u64,
    pub tokens_seen: u64,
    pub val_loss: f64,
}

/// Receives per-step metrics, validation points, budget-mark checkpoint
/// snapshots, and the diagnostic checkpoint on a non-finite abort.
pub trait MetricsSink {
    fn on_step(&mut self, m: &StepMetrics);
    fn on_validation(&mut self, v: &ValPoint);
    /// Cumulative stage-local seen-token thresholds at which the sink wants
    /// a checkpoint snapshot.
    fn mark_points(&self) -> Vec<u64> {
        Vec::new()
    }
    fn on_mark(&mut self, _cumulative_seen: u64, _snapshot: &Checkpoint) -> Result<()> {
        Ok(())
    }
    fn on_abort(&mut self, _diagnostic: &Checkpoint) {}
}

/// Collects everything in memory.
#[derive(Debug, Default)]
pub struct VecSink {
    pub steps: Vec<StepMetrics>,
    pub validations: Vec<ValPoint>,
    pub marks: Vec<u64>,
    pub mark_checkpoints: Vec<(u64, Checkpoint)>,
}

impl MetricsSink for VecSink {
    fn on_step(&mut self, m: &StepMetrics) {
        self.steps.push(*m);
    }
    fn on_validation(&mut self, v: &ValPoint) {
        self.validations.push(*v);
    }
    fn mark_points(&self) -> Vec<u64> {
        self.marks.clone()
    }
    fn on_mark(&mut self, cumulative_seen: u64, snapshot: &Checkpoint) -> Result<()> {
        self.mark_checkpoints.push((cumulative_seen, snapshot.clone()));
        Ok(())
    }
}

/// Deterministic batch construction for a pretraining step.
///
/// Every objective lays out approximately `tokens_per_batch` seen tokens per
/// step: FLM uses `tokens_per_batch / seq_len` rows, PLM half as many rows of
/// doubled length, MLM fits one budget-sized example per row.
pub fn build_pretrain_batch(
    objective: ObjectiveKind,
    arch: ArchitectureKind,
    stream: &[u32],
    vocab: &Vocab,
    seq_len: usize,
    tokens_per_batch: usize,
    seed: u64,
    step: u64,
    empty_encoder: bool,
) -> Result<PackedBatch> {
    if tokens_per_batch % seq_len != 0 || tokens_per_batch < seq_len {
        return Err(LabError::InvalidConfig(format!(
            "tokens_per_batch {tokens_per_batch} must be a positive multiple of seq_len {seq_len}"
        )));
    }
    match objective {
        ObjectiveKind::Flm => {
            let rows = tokens_per_batch / seq_len;
            let start = step * (rows * seq_len) as u64;
            let mut batch = pack_flm(stream, start, seq_len, rows)?;
            if empty_encoder {
                attach_stub_encoder(&mut batch);
            }
            Ok(batch)
        }
        ObjectiveKind::Plm => {
            let rows = (tokens_per_batch / (2 * seq_len)).max(1);
            if stream.len() < seq_len {
                return Err(LabError::InsufficientData(
                    "stream shorter than seq_len".into(),
                ));
            }
            let n = stream.len() as u64;
            let chunk = |idx: u64| -> Vec<u32> {
                let base = idx * seq_len as u64;
                (0..seq_len as u64)
                    .map(|j| stream[((base + j) % n) as usize])
                    .collect()
            };
            let examples: Vec<(Vec<u32>, Vec<u32>)> = (0..rows as u64)
                .map(|r| {
                    let base = step * 2 * rows as u64 + 2 * r;
                    (chunk(base), chunk(base + 1))
                })
                .collect();
            let mut rng = substream(seed, "plm-split", step);
            match arch {
                ArchitectureKind::EncoderDecoder => pack_plm_encdec(&examples, seq_len, &mut rng),
                _ => pack_plm(&examples, seq_len, &mut rng),
            }
        }
        ObjectiveKind::Mlm {
            mask_rate,
            mean_span,
        } => {
            let rows = tokens_per_batch / seq_len;
            let raw_len = raw_len_for_budget(seq_len, mask_rate, mean_span)?;
            if stream.is_empty() {
                return Err(LabError::InsufficientData("empty stream".into()));
            }
            let n = stream.len() as u64;
            let corrupted = (0..rows as u64)
                .map(|r| {
                    let idx = step * rows as u64 + r;
                    let base = idx * raw_len as u64;
                    let tokens: Vec<u32> = (0..raw_len as u64)
                        .map(|j| stream[((base + j) % n) as usize])
                        .collect();
                    let mut rng = substream(seed, "mlm-corrupt", idx);
                    corrupt_spans(&tokens, mask_rate, mean_span, vocab, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            make_mlm_batch(&corrupted, arch, seq_len, objective)
        }
    }
}

/// Appendix-F routing: a one-eos-token encoder stream per row.
fn attach_stub_encoder(batch: &mut PackedBatch) {
    let rows = batch.rows();
    batch.encoder = Some(EncoderStreams {
        seq_len: 1,
        input_ids: vec![EOS_ID; rows],
        segment_ids: vec![1; rows],
    });
}

/// Mean validation cross-entropy over a fixed deterministic batch set.
pub fn validation_loss(
    ck: &Checkpoint,
    objective: ObjectiveKind,
    stage: &TrainingStage,
    val_stream: &[u32],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..VAL_BATCHES {
        let batch = build_pretrain_batch(
            objective,
            ck.forward_arch(),
            val_stream,
            &ck.meta.vocab,
            stage.seq_len,
            stage.tokens_per_batch,
            VAL_SEED,
            k as u64,
            ck.meta.empty_encoder,
        )?;
        let mut cfg = ck.meta.config.clone();
        cfg.dropout_rate = 0.0;
        let logits = crate::model::forward::forward(
            &ck.params,
            &cfg,
            ck.forward_arch(),
            &batch,
            Mode::Infer,
            0,
        )?;
        let b = crate::model::loss::loss_and_zloss(
            &logits,
            &batch.target_ids,
            &batch.loss_mask,
            0.0,
        )?;
        total += b.cross_entropy * b.tokens_trained as f64;
        count += b.tokens_trained;
    }
    Ok(total / count.max(1) as f64)
}

/// Runs one stage to its seen-token budget: batch → forward → loss(+z) →
/// grads → Adafactor, with periodic validation on the held-out corpus tail.
/// The optimizer state starts fresh (stage boundaries reset accumulators)
/// and the schedule counts stage-local steps.
pub fn run_stage(
    start: &Checkpoint,
    stage: &TrainingStage,
    corpus: &Corpus,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    let objective = match &stage.objective {
        StageKind::Pretrain { objective } => *objective,
        StageKind::MultitaskFinetune => {
            return Err(LabError::InvalidConfig(
                "multitask finetuning runs through multitask_finetune".into(),
            ))
        }
    };
    objective.validate()?;
    if stage.arch != start.meta.arch {
        return Err(LabError::WrongLineage {
            expected: format!("checkpoint arch {}", stage.arch.label()),
            found: start.meta.arch.label().to_string(),
        });
    }
    if corpus.documents.is_empty() {
        return Err(LabError::InsufficientData("empty corpus".into()));
    }
    let vocab = start.meta.vocab;
    let (train_stream, val_stream) = corpus.split_stream(&vocab, HOLDOUT_FRAC);

    let mut ck = start.clone();
    let mut cfg = ck.meta.config.clone();
    cfg.dropout_rate = stage.dropout;
    let arch = ck.forward_arch();
    let mut opt_state = OptimizerState::new();
    let mut ledger = BudgetLedger::default();

    let approx_steps =
        (stage.token_budget_seen as f64 / stage.tokens_per_batch as f64).ceil() as u64;
    let val_every = ((approx_steps as f64 * VALIDATION_FRAC).ceil() as u64).max(1);
    let mut marks = sink.mark_points();
    marks.sort_unstable();
    let mut next_mark = 0usize;
    let mut last_val: Option<f64> = None;

    let assemble = |ck: &mut Checkpoint,
                    opt_state: &OptimizerState,
                    ledger: &BudgetLedger,
                    last_val: Option<f64>| {
        let mut out = ck.clone();
        out.optimizer_state = Some(opt_state.clone());
        out.meta.arch = stage.arch;
        out.meta.objective = Some(stage.objective.label().to_string());
        out.meta.cumulative_tokens_seen = start.meta.cumulative_tokens_seen + ledger.tokens_seen;
        out.meta.cumulative_tokens_trained =
            start.meta.cumulative_tokens_trained + ledger.tokens_trained;
        out.meta.stage_history.push(StageSummary {
            arch: stage.arch,
            objective: stage.objective.label().to_string(),
            tokens_seen: ledger.tokens_seen,
            tokens_trained: ledger.tokens_trained,
            steps: ledger.steps,
            final_val_loss: last_val,
        });
        out
    };

    let mut step = 0u64;
    while ledger.tokens_seen < stage.token_budget_seen {
        let batch = build_pretrain_batch(
            objective,
            arch,
            &train_stream,
            &vocab,
            stage.seq_len,
            stage.tokens_per_batch,
            stage.seed,
            step,
            ck.meta.empty_encoder,
        )?;
        let acc = token_accounting(&batch);
        let dropout_seed = subseed(stage.seed, "dropout-step", step);
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
            let diagnostic = assemble(&mut ck, &opt_state, &ledger, last_val);
            sink.on_abort(&diagnostic);
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

        let done = ledger.tokens_seen >= stage.token_budget_seen;
        if ledger.steps % val_every == 0 || done {
            let vl = validation_loss(&ck, objective, stage, &val_stream)?;
            last_val = Some(vl);
            sink.on_validation(&ValPoint {
                step,
                tokens_seen: ledger.tokens_seen,
                val_loss: vl,
            });
        }
        while next_mark < marks.len() && ledger.tokens_seen >= marks[next_mark] {
            let snapshot = assemble(&mut ck, &opt_state, &ledger, last_val);
            sink.on_mark(ledger.tokens_seen, &snapshot)?;
            next_mark += 1;
        }
        step += 1;
    }
    if last_val.is_none() && stage.token_budget_seen == 0 {
        // zero-budget stages still record a validation point
        let vl = validation_loss(&ck, objective, stage, &val_stream)?;
        last_val = Some(vl);
    }
    Ok(assemble(&mut ck, &opt_state, &ledger, last_val))
}
