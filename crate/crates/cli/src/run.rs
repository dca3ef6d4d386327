//! Executing one experiment spec: stages in order, metrics to disk,
//! checkpoints and evaluation reports at budget marks, manifest at the end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tlab_core::data::corpus::pattern_corpus;
use tlab_core::data::{Corpus, Vocab};
use tlab_core::error::{LabError, Result};
use tlab_core::eval::{evaluate, toy_task_suite, EvalTask};
use tlab_core::trainer::{
    convert, multitask_finetune, run_stage, save, Checkpoint, ConvertMode, MetricsSink,
    StepMetrics, TaskMixture, TrainingStage, ValPoint,
};

use crate::spec::{ConvertSpec, ExperimentSpec, ObjectiveSpec, TaskSourceSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub label: String,
    pub cumulative_tokens_before: u64,
    pub tokens_seen: u64,
    pub steps: u64,
    pub final_val_loss: Option<f64>,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub metrics: String,
    pub metrics_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mark_tokens: u64,
    pub checkpoint: String,
    pub report: String,
    pub report_sha256: String,
}

/// Everything a finished (or aborted) run produced. `content_hash` covers
/// only the deterministic artifacts, never wall-clock fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub spec_sha256: String,
    pub stages: Vec<StageRecord>,
    pub evals: Vec<EvalRecord>,
    pub total_steps: u64,
    pub wall_clock_s: f64,
    pub complete: bool,
    pub content_hash: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn content_hash(manifest: &RunManifest) -> String {
    let mut h = Sha256::new();
    h.update(manifest.spec_sha256.as_bytes());
    for s in &manifest.stages {
        h.update(s.checkpoint_sha256.as_bytes());
        h.update(s.metrics_sha256.as_bytes());
    }
    for e in &manifest.evals {
        h.update(e.report_sha256.as_bytes());
    }
    hex(&h.finalize())
}

/// Streams metrics to a JSONL file and snapshots checkpoints at marks.
struct FileSink {
    metrics: BufWriter<File>,
    marks: Vec<u64>,
    mark_checkpoints: Vec<(u64, PathBuf)>,
    out_dir: PathBuf,
    stage_index: usize,
    steps: u64,
}

impl FileSink {
    fn new(out_dir: &Path, stage_index: usize, marks: Vec<u64>) -> Result<(Self, PathBuf)> {
        let path = out_dir.join(format!("metrics_stage_{stage_index:02}.jsonl"));
        Ok((
            FileSink {
                metrics: BufWriter::new(File::create(&path)?),
                marks,
                mark_checkpoints: Vec::new(),
                out_dir: out_dir.to_path_buf(),
                stage_index,
                steps: 0,
            },
            path,
        ))
    }

    fn write_record(&mut self, value: serde_json::Value) {
        serde_json::to_writer(&mut self.metrics, &value).expect("metrics serialization");
        self.metrics.write_all(b"\n").expect("metrics write");
    }
}

impl MetricsSink for FileSink {
    fn on_step(&mut self, m: &StepMetrics) {
        self.steps += 1;
        self.write_record(serde_json::json!({"kind": "step", "data": m}));
    }
    fn on_validation(&mut self, v: &ValPoint) {
        self.write_record(serde_json::json!({"kind": "validation", "data": v}));
    }
    fn mark_points(&self) -> Vec<u64> {
        self.marks.clone()
    }
    fn on_mark(&mut self, cumulative_seen: u64, snapshot: &Checkpoint) -> Result<()> {
        let path = self.out_dir.join(format!(
            "checkpoint_stage_{:02}_mark_{cumulative_seen}.bin",
            self.stage_index
        ));
        save(snapshot, &path)?;
        self.mark_checkpoints.push((cumulative_seen, path));
        Ok(())
    }
    fn on_abort(&mut self, diagnostic: &Checkpoint) {
        let path = self
            .out_dir
            .join(format!("checkpoint_stage_{:02}_diagnostic.bin", self.stage_index));
        let _ = save(diagnostic, &path);
    }
}

fn materialize_corpus(spec: &ExperimentSpec, out_dir: &Path) -> Result<Corpus> {
    match &spec.corpus {
        crate::spec::CorpusSpec::Synthetic {
            seed,
            documents,
            doc_len,
        } => {
            let corpus = pattern_corpus(*seed, *documents, *doc_len);
            let text: Vec<String> = corpus
                .documents
                .iter()
                .map(|d| String::from_utf8_lossy(d).into_owned())
                .collect();
            std::fs::write(out_dir.join("corpus.txt"), text.join("\n\n"))?;
            Ok(corpus)
        }
        crate::spec::CorpusSpec::File { path } => Corpus::load(path),
    }
}

fn materialize_tasks(spec: &ExperimentSpec, out_dir: &Path) -> Result<Vec<EvalTask>> {
    let Some(eval) = &spec.eval else {
        return Ok(Vec::new());
    };
    let tasks = match &eval.tasks {
        TaskSourceSpec::Synthetic {
            seed,
            n_eval,
            n_train,
        } => toy_task_suite(*seed, *n_eval, *n_train),
        TaskSourceSpec::Files { paths } => paths
            .iter()
            .map(EvalTask::load)
            .collect::<Result<Vec<_>>>()?,
    };
    let task_dir = out_dir.join("tasks");
    std::fs::create_dir_all(&task_dir)?;
    for t in &tasks {
        t.save(task_dir.join(format!("{}.json", t.name)))?;
    }
    Ok(tasks)
}

fn write_manifest(out_dir: &Path, manifest: &mut RunManifest) -> Result<PathBuf> {
    manifest.content_hash = content_hash(manifest);
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
    Ok(path)
}

fn evaluate_mark(
    spec: &ExperimentSpec,
    tasks: &[EvalTask],
    ck_path: &Path,
    mark_tokens: u64,
    out_dir: &Path,
) -> Result<EvalRecord> {
    let eval = spec.eval.as_ref().expect("eval spec present");
    let ck = tlab_core::trainer::load(ck_path)?;
    let report = evaluate(&ck, tasks, eval.policy, eval.scoring, eval.max_len)?;
    let report_path = out_dir.join(format!("eval_mark_{mark_tokens}.json"));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    Ok(EvalRecord {
        mark_tokens,
        checkpoint: ck_path.display().to_string(),
        report: report_path.display().to_string(),
        report_sha256: sha256_file(&report_path)?,
    })
}

/// Runs a parsed spec under `out_root/<name>/`, overwriting any previous run
/// of the same name. On mid-run failure the last good checkpoint and a
/// partial manifest remain on disk and the error propagates.
pub fn cmd_run(spec: &ExperimentSpec, out_root: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let out_dir = out_root.join(&spec.name);
    if out_dir.exists() {
        std::fs::remove_dir_all(&out_dir)?;
    }
    std::fs::create_dir_all(&out_dir)?;
    let spec_text = toml::to_string_pretty(spec)
        .map_err(|e| LabError::Validation(format!("spec re-serialization: {e}")))?;
    std::fs::write(out_dir.join("spec.toml"), &spec_text)?;
    let spec_sha256 = hex(&Sha256::digest(spec_text.as_bytes()));

    let corpus = materialize_corpus(spec, &out_dir)?;
    let tasks = materialize_tasks(spec, &out_dir)?;
    let vocab = Vocab::new(spec.model.vocab_size, spec.tokenizer.n_sentinels)?;
    let config = spec.model.to_config();

    // evaluation marks on the cumulative pretraining axis
    let pretrain_budget = spec.pretrain_budget();
    let global_marks: Vec<u64> = spec
        .eval
        .as_ref()
        .map(|e| {
            let mut m: Vec<u64> = e
                .marks
                .iter()
                .map(|f| (f * pretrain_budget as f64).round() as u64)
                .collect();
            m.sort_unstable();
            m.dedup();
            m
        })
        .unwrap_or_default();

    let mut manifest = RunManifest {
        name: spec.name.clone(),
        spec_sha256,
        stages: Vec::new(),
        evals: Vec::new(),
        total_steps: 0,
        wall_clock_s: 0.0,
        complete: false,
        content_hash: String::new(),
    };

    let mut ck: Option<Checkpoint> = None;
    let mut cumulative_pretrain = 0u64;
    let run_result: Result<()> = (|| {
        for (i, stage_spec) in spec.stages.iter().enumerate() {
            let arch = stage_spec.arch.kind();
            // establish the starting checkpoint for this stage
            let start = match ck.take() {
                None => Checkpoint::fresh(&config, arch, vocab, stage_spec.seed, spec.precision)?,
                Some(prev) => {
                    let from = prev.meta.arch;
                    match stage_spec.convert {
                        Some(ConvertSpec::EmptyEncoder) => {
                            convert(&prev, arch, ConvertMode::EmptyEncoderExperimental)?
                        }
                        Some(ConvertSpec::MaskSwitch) => {
                            convert(&prev, arch, ConvertMode::MaskSwitch)?
                        }
                        None if from == arch => prev,
                        None => convert(&prev, arch, ConvertMode::MaskSwitch)?,
                    }
                }
            };
            let is_pretrain = stage_spec.objective != ObjectiveSpec::Mtf;
            // marks falling inside this stage, in stage-local seen tokens
            let stage_marks: Vec<u64> = if is_pretrain {
                global_marks
                    .iter()
                    .filter(|m| {
                        **m > cumulative_pretrain
                            && **m <= cumulative_pretrain + stage_spec.budget_tokens
                    })
                    .map(|m| m - cumulative_pretrain)
                    .collect()
            } else {
                Vec::new()
            };
            let (mut sink, metrics_path) = FileSink::new(&out_dir, i, stage_marks)?;
            let stage: TrainingStage = stage_spec.to_stage(spec.seq_len)?;
            let finished = if is_pretrain {
                run_stage(&start, &stage, &corpus, &mut sink)?
            } else {
                let mixture = build_mixture(&tasks, stage_spec)?;
                multitask_finetune(&start, &mixture, &stage, &mut sink)?
            };
            drop(sink.metrics.flush());

            let ck_path = out_dir.join(format!("checkpoint_stage_{i:02}.bin"));
            save(&finished, &ck_path)?;
            let summary = finished.meta.stage_history.last().unwrap();
            manifest.total_steps += summary.steps;
            manifest.stages.push(StageRecord {
                index: i,
                label: stage.label(),
                cumulative_tokens_before: cumulative_pretrain,
                tokens_seen: summary.tokens_seen,
                steps: summary.steps,
                final_val_loss: summary.final_val_loss,
                checkpoint: ck_path.display().to_string(),
                checkpoint_sha256: sha256_file(&ck_path)?,
                metrics: metrics_path.display().to_string(),
                metrics_sha256: sha256_file(&metrics_path)?,
            });

            // evaluate mark snapshots (and the exact stage end when a mark
            // lands there)
            if spec.eval.is_some() {
                for (local_tokens, mark_path) in &sink.mark_checkpoints {
                    let mark_tokens = cumulative_pretrain + local_tokens;
                    manifest.evals.push(evaluate_mark(
                        spec,
                        &tasks,
                        mark_path,
                        mark_tokens,
                        &out_dir,
                    )?);
                }
            }
            if is_pretrain {
                cumulative_pretrain += summary.tokens_seen;
            }
            ck = Some(finished);
        }
        Ok(())
    })();

    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    match run_result {
        Ok(()) => {
            manifest.complete = true;
            write_manifest(&out_dir, &mut manifest)?;
            Ok(manifest)
        }
        Err(e) => {
            let _ = write_manifest(&out_dir, &mut manifest);
            Err(e)
        }
    }
}

fn build_mixture(
    tasks: &[EvalTask],
    stage_spec: &crate::spec::StageSpec,
) -> Result<TaskMixture> {
    let mut selected = Vec::new();
    for name in &stage_spec.mtf_tasks {
        let task = tasks
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| LabError::Validation(format!("mtf task '{name}' not in eval suite")))?;
        if task.train_examples.is_empty() {
            return Err(LabError::Validation(format!(
                "mtf task '{name}' has no train examples"
            )));
        }
        selected.push(task.to_finetune_task()?);
    }
    Ok(TaskMixture {
        tasks: selected,
        per_task_cap: stage_spec.mtf_cap,
    })
}
