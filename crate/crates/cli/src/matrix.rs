//! The architecture × objective comparison matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tlab_core::error::{LabError, Result};

use crate::run::{cmd_run, RunManifest};
use crate::spec::{
    ArchSpec, CorpusSpec, EvalSpec, ExperimentSpec, ModelSpec, ObjectiveSpec, ScheduleSpec,
    StageSpec, TokenizerSpec, SPEC_VERSION,
};

fn verr(msg: impl Into<String>) -> LabError {
    LabError::Validation(msg.into())
}

/// The six admitted ⟨architecture, objective⟩ pairs: the causal decoder
/// takes FLM or MLM, the non-causal decoder and encoder-decoder take PLM or
/// MLM.
pub const FULL_MATRIX: &[(ArchSpec, ObjectiveSpec)] = &[
    (ArchSpec::Cd, ObjectiveSpec::Flm),
    (ArchSpec::Cd, ObjectiveSpec::Mlm),
    (ArchSpec::Nd, ObjectiveSpec::Plm),
    (ArchSpec::Nd, ObjectiveSpec::Mlm),
    (ArchSpec::Ed, ObjectiveSpec::Plm),
    (ArchSpec::Ed, ObjectiveSpec::Mlm),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixStageDefaults {
    pub budget_tokens: u64,
    pub tokens_per_batch: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub dropout: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub version: u32,
    pub name: String,
    pub seq_len: usize,
    /// "full" or explicit pairs like ["cd:flm", "nd:mlm"].
    pub pairs: toml::Value,
    pub model: ModelSpec,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub eval: Option<EvalSpec>,
    pub stage: MatrixStageDefaults,
}

fn parse_pair(s: &str) -> Result<(ArchSpec, ObjectiveSpec)> {
    let (a, o) = s
        .split_once(':')
        .ok_or_else(|| verr(format!("pair '{s}' must look like 'cd:flm'")))?;
    let arch = match a {
        "cd" => ArchSpec::Cd,
        "nd" => ArchSpec::Nd,
        "ed" => ArchSpec::Ed,
        _ => return Err(verr(format!("unknown architecture '{a}'"))),
    };
    let obj = match o {
        "flm" => ObjectiveSpec::Flm,
        "plm" => ObjectiveSpec::Plm,
        "mlm" => ObjectiveSpec::Mlm,
        _ => return Err(verr(format!("unknown objective '{o}'"))),
    };
    if !FULL_MATRIX.contains(&(arch, obj)) {
        return Err(verr(format!(
            "pair '{s}' is not an admitted architecture/objective combination"
        )));
    }
    Ok((arch, obj))
}

impl MatrixSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: MatrixSpec =
            toml::from_str(text).map_err(|e| verr(format!("matrix spec parse error: {e}")))?;
        if spec.version != SPEC_VERSION {
            return Err(verr(format!("matrix spec version {} unsupported", spec.version)));
        }
        spec.resolve_pairs()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn resolve_pairs(&self) -> Result<Vec<(ArchSpec, ObjectiveSpec)>> {
        match &self.pairs {
            toml::Value::String(s) if s == "full" => Ok(FULL_MATRIX.to_vec()),
            toml::Value::String(s) => Err(verr(format!("pairs must be \"full\" or a list, got '{s}'"))),
            toml::Value::Array(items) => {
                if items.is_empty() {
                    return Err(verr("pairs list is empty"));
                }
                items
                    .iter()
                    .map(|v| {
                        v.as_str()
                            .ok_or_else(|| verr("pairs entries must be strings"))
                            .and_then(parse_pair)
                    })
                    .collect()
            }
            _ => Err(verr("pairs must be \"full\" or a list of 'arch:objective' strings")),
        }
    }

    fn experiment_for(&self, arch: ArchSpec, obj: ObjectiveSpec) -> ExperimentSpec {
        let mut model = self.model.clone();
        // encoder-decoder runs double the stack, decoder-only runs drop it
        if arch == ArchSpec::Ed {
            if model.encoder_layers == 0 {
                model.encoder_layers = model.decoder_layers;
            }
        } else {
            model.encoder_layers = 0;
        }
        let obj_name = match obj {
            ObjectiveSpec::Flm => "flm",
            ObjectiveSpec::Plm => "plm",
            ObjectiveSpec::Mlm => "mlm",
            ObjectiveSpec::Mtf => "mtf",
        };
        let arch_name = match arch {
            ArchSpec::Cd => "cd",
            ArchSpec::Nd => "nd",
            ArchSpec::Ed => "ed",
        };
        ExperimentSpec {
            version: SPEC_VERSION,
            name: format!("{}-{arch_name}-{obj_name}", self.name),
            seq_len: self.seq_len,
            precision: tlab_core::Precision::High,
            model,
            tokenizer: self.tokenizer.clone(),
            corpus: self.corpus.clone(),
            eval: self.eval.clone(),
            stages: vec![StageSpec {
                arch,
                objective: obj,
                budget_tokens: self.stage.budget_tokens,
                tokens_per_batch: self.stage.tokens_per_batch,
                schedule: self.stage.schedule.clone(),
                dropout: self.stage.dropout,
                seed: self.stage.seed,
                mlm_mask_rate: None,
                mlm_mean_span: None,
                convert: None,
                mtf_tasks: vec![],
                mtf_cap: 512,
            }],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub arch: String,
    pub objective: String,
    pub mark_tokens: u64,
    pub final_val_loss: Option<f64>,
    pub aggregate_median_then_mean: Option<f64>,
    pub aggregate_single_prompt_mean: Option<f64>,
}

/// Runs every admitted pair with shared corpus and seeds; returns the run
/// manifests and writes a comparison table.
pub fn cmd_matrix(spec: &MatrixSpec, out_root: &Path) -> Result<Vec<RunManifest>> {
    let pairs = spec.resolve_pairs()?;
    // validate every derived experiment before running any of them
    let experiments: Vec<ExperimentSpec> = pairs
        .iter()
        .map(|(a, o)| {
            let e = spec.experiment_for(*a, *o);
            e.validate()?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let mut manifests = Vec::with_capacity(experiments.len());
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for (exp, (arch, obj)) in experiments.iter().zip(&pairs) {
        let manifest = cmd_run(exp, out_root)?;
        let arch_label = arch.kind().label().to_string();
        let obj_label = format!("{:?}", obj).to_uppercase();
        if manifest.evals.is_empty() {
            rows.push(ComparisonRow {
                run: manifest.name.clone(),
                arch: arch_label,
                objective: obj_label,
                mark_tokens: manifest.stages.last().map(|s| s.tokens_seen).unwrap_or(0),
                final_val_loss: manifest.stages.last().and_then(|s| s.final_val_loss),
                aggregate_median_then_mean: None,
                aggregate_single_prompt_mean: None,
            });
        } else {
            for ev in &manifest.evals {
                let report: tlab_core::eval::EvalReport =
                    serde_json::from_str(&std::fs::read_to_string(&ev.report)?)?;
                rows.push(ComparisonRow {
                    run: manifest.name.clone(),
                    arch: arch_label.clone(),
                    objective: obj_label.clone(),
                    mark_tokens: ev.mark_tokens,
                    final_val_loss: manifest.stages.last().and_then(|s| s.final_val_loss),
                    aggregate_median_then_mean: Some(report.aggregate_median_then_mean),
                    aggregate_single_prompt_mean: Some(report.aggregate_single_prompt_mean),
                });
            }
        }
        manifests.push(manifest);
    }
    let table_path = out_root.join(format!("{}_comparison.tsv", spec.name));
    let mut out = String::from(
        "run\tarch\tobjective\tmark_tokens\tfinal_val_loss\taggregate_median_then_mean\taggregate_single_prompt_mean\n",
    );
    for r in &rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.run,
            r.arch,
            r.objective,
            r.mark_tokens,
            r.final_val_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.aggregate_median_then_mean
                .map(|v| v.to_string())
                .unwrap_or_default(),
            r.aggregate_single_prompt_mean
                .map(|v| v.to_string())
                .unwrap_or_default(),
        ));
    }
    std::fs::write(&table_path, out)?;
    Ok(manifests)
}
