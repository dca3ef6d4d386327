//! Experiment spec files: versioned TOML, unknown fields are errors.

use serde::{Deserialize, Serialize};
use tlab_core::data::{ObjectiveKind, Vocab};
use tlab_core::error::LabError;
use tlab_core::eval::{AggregationPolicy, ScoringPolicy};
use tlab_core::model::{ArchitectureKind, ModelConfig, RelBiasConfig};
use tlab_core::optim::LrSchedule;
use tlab_core::trainer::{StageKind, TrainingStage};
use tlab_core::Precision;

pub const SPEC_VERSION: u32 = 1;

fn verr(msg: impl Into<String>) -> LabError {
    LabError::Validation(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    #[serde(default)]
    pub encoder_layers: usize,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
    #[serde(default)]
    pub rel_bias: RelBiasSpec,
    #[serde(default)]
    pub dropout_rate: f64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelBiasSpec {
    pub n_buckets: usize,
    pub max_distance: usize,
}

impl Default for RelBiasSpec {
    fn default() -> Self {
        let d = RelBiasConfig::default();
        RelBiasSpec {
            n_buckets: d.n_buckets,
            max_distance: d.max_distance,
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            decoder_layers: self.decoder_layers,
            encoder_layers: self.encoder_layers,
            tied_embeddings: self.tied_embeddings,
            rel_bias: RelBiasConfig {
                n_buckets: self.rel_bias.n_buckets,
                max_distance: self.rel_bias.max_distance,
            },
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    #[serde(default = "default_sentinels")]
    pub n_sentinels: usize,
}

fn default_sentinels() -> usize {
    64
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec {
            n_sentinels: default_sentinels(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum CorpusSpec {
    /// Patterned toy corpus.
    Synthetic {
        seed: u64,
        documents: usize,
        doc_len: usize,
    },
    /// Plain UTF-8 text file, documents separated by blank lines.
    File { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum TaskSourceSpec {
    Synthetic {
        seed: u64,
        n_eval: usize,
        n_train: usize,
    },
    Files {
        paths: Vec<String>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Fractions of the cumulative pretraining budget at which checkpoints
    /// are evaluated.
    #[serde(default = "default_marks")]
    pub marks: Vec<f64>,
    #[serde(default = "default_policy")]
    pub policy: AggregationPolicy,
    #[serde(default = "default_scoring")]
    pub scoring: ScoringPolicy,
    #[serde(default = "default_eval_max_len")]
    pub max_len: usize,
    pub tasks: TaskSourceSpec,
}

fn default_marks() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}
fn default_policy() -> AggregationPolicy {
    AggregationPolicy::MedianThenMean
}
fn default_scoring() -> ScoringPolicy {
    ScoringPolicy::SumLogprob
}
fn default_eval_max_len() -> usize {
    192
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchSpec {
    Cd,
    Nd,
    Ed,
}

impl ArchSpec {
    pub fn kind(&self) -> ArchitectureKind {
        match self {
            ArchSpec::Cd => ArchitectureKind::CausalDecoder,
            ArchSpec::Nd => ArchitectureKind::NonCausalDecoder,
            ArchSpec::Ed => ArchitectureKind::EncoderDecoder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSpec {
    Flm,
    Plm,
    Mlm,
    Mtf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", untagged)]
pub enum ScheduleSpec {
    Named(String),
    Fixed { fixed: f64 },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Named("inverse_sqrt".into())
    }
}

impl ScheduleSpec {
    pub fn to_schedule(&self) -> Result<LrSchedule, LabError> {
        match self {
            ScheduleSpec::Named(n) if n == "inverse_sqrt" => Ok(LrSchedule::default()),
            ScheduleSpec::Named(n) => Err(verr(format!("unknown schedule '{n}'"))),
            ScheduleSpec::Fixed { fixed } => {
                if *fixed <= 0.0 {
                    return Err(verr("fixed learning rate must be positive"));
                }
                Ok(LrSchedule::Fixed { value: *fixed })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvertSpec {
    MaskSwitch,
    EmptyEncoder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub arch: ArchSpec,
    pub objective: ObjectiveSpec,
    pub budget_tokens: u64,
    pub tokens_per_batch: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub dropout: f64,
    pub seed: u64,
    #[serde(default)]
    pub mlm_mask_rate: Option<f64>,
    #[serde(default)]
    pub mlm_mean_span: Option<f64>,
    /// Required on an ED → CD boundary; CD ↔ ND converts implicitly.
    #[serde(default)]
    pub convert: Option<ConvertSpec>,
    /// Task names drawn from the eval suite (mtf stages only).
    #[serde(default)]
    pub mtf_tasks: Vec<String>,
    #[serde(default = "default_cap")]
    pub mtf_cap: usize,
}

fn default_cap() -> usize {
    512
}

impl StageSpec {
    pub fn objective_kind(&self) -> Result<StageKind, LabError> {
        Ok(match self.objective {
            ObjectiveSpec::Flm => StageKind::Pretrain {
                objective: ObjectiveKind::Flm,
            },
            ObjectiveSpec::Plm => StageKind::Pretrain {
                objective: ObjectiveKind::Plm,
            },
            ObjectiveSpec::Mlm => StageKind::Pretrain {
                objective: ObjectiveKind::Mlm {
                    mask_rate: self.mlm_mask_rate.unwrap_or(0.15),
                    mean_span: self.mlm_mean_span.unwrap_or(3.0),
                },
            },
            ObjectiveSpec::Mtf => StageKind::MultitaskFinetune,
        })
    }

    pub fn to_stage(&self, seq_len: usize) -> Result<TrainingStage, LabError> {
        Ok(TrainingStage {
            arch: self.arch.kind(),
            objective: self.objective_kind()?,
            token_budget_seen: self.budget_tokens,
            tokens_per_batch: self.tokens_per_batch,
            seq_len,
            schedule: self.schedule.to_schedule()?,
            dropout: self.dropout,
            seed: self.seed,
        })
    }
}

/// A full experiment: model, corpus, ordered stages, optional evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub version: u32,
    pub name: String,
    pub seq_len: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    pub model: ModelSpec,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub eval: Option<EvalSpec>,
    pub stages: Vec<StageSpec>,
}

fn default_precision() -> Precision {
    Precision::High
}

/// The objective/architecture pairings the study admits. FLM belongs to the
/// causal decoder (including the experimental empty-encoder conversion); PLM
/// to the non-causal decoder and the encoder-decoder; MLM to all three.
pub fn pairing_allowed(arch: ArchitectureKind, objective: ObjectiveSpec) -> bool {
    match objective {
        ObjectiveSpec::Flm => arch == ArchitectureKind::CausalDecoder,
        ObjectiveSpec::Plm => arch != ArchitectureKind::CausalDecoder,
        ObjectiveSpec::Mlm | ObjectiveSpec::Mtf => true,
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self, LabError> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| verr(format!("spec parse error: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, LabError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.version != SPEC_VERSION {
            return Err(verr(format!(
                "spec version {} unsupported (expected {SPEC_VERSION})",
                self.version
            )));
        }
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(verr("name must be nonempty [A-Za-z0-9_-]"));
        }
        if self.stages.is_empty() {
            return Err(verr("stages: at least one stage required"));
        }
        Vocab::new(self.model.vocab_size, self.tokenizer.n_sentinels)
            .map_err(|e| verr(format!("tokenizer: {e}")))?;
        let needs_encoder = self
            .stages
            .iter()
            .any(|s| s.arch == ArchSpec::Ed || s.convert == Some(ConvertSpec::EmptyEncoder));
        let cfg = self.model.to_config();
        if needs_encoder {
            cfg.validate(ArchitectureKind::EncoderDecoder)
                .map_err(|e| verr(format!("model: {e}")))?;
        } else {
            cfg.validate(self.stages[0].arch.kind())
                .map_err(|e| verr(format!("model: {e}")))?;
        }

        let mut prev: Option<&StageSpec> = None;
        for (i, st) in self.stages.iter().enumerate() {
            let label = format!("stages[{i}]");
            if st.budget_tokens == 0 {
                return Err(verr(format!("{label}: budget_tokens must be positive")));
            }
            if st.tokens_per_batch == 0
                || st.tokens_per_batch % self.seq_len != 0
            {
                return Err(verr(format!(
                    "{label}: tokens_per_batch must be a positive multiple of seq_len"
                )));
            }
            if !(0.0..1.0).contains(&st.dropout) {
                return Err(verr(format!("{label}: dropout must be in [0,1)")));
            }
            if !pairing_allowed(st.arch.kind(), st.objective) {
                return Err(verr(format!(
                    "{label}: objective {:?} not admitted on {}",
                    st.objective,
                    st.arch.kind().label()
                )));
            }
            st.schedule.to_schedule().map_err(|e| verr(format!("{label}: {e}")))?;
            if st.objective == ObjectiveSpec::Mtf {
                if self.eval.is_none() {
                    return Err(verr(format!(
                        "{label}: mtf stages need an [eval] task source"
                    )));
                }
                if st.mtf_tasks.is_empty() {
                    return Err(verr(format!("{label}: mtf_tasks must name at least one task")));
                }
            } else if !st.mtf_tasks.is_empty() {
                return Err(verr(format!("{label}: mtf_tasks only applies to mtf stages")));
            }
            match prev {
                None => {
                    if st.convert.is_some() {
                        return Err(verr(format!("{label}: first stage cannot convert")));
                    }
                    if st.arch == ArchSpec::Ed && self.model.encoder_layers == 0 {
                        return Err(verr(format!(
                            "{label}: encoder-decoder stages need model.encoder_layers > 0"
                        )));
                    }
                }
                Some(p) => {
                    let from = p.arch.kind();
                    let to = st.arch.kind();
                    let ok = match st.convert {
                        Some(ConvertSpec::EmptyEncoder) => {
                            from == ArchitectureKind::EncoderDecoder
                                && to == ArchitectureKind::CausalDecoder
                        }
                        Some(ConvertSpec::MaskSwitch) => {
                            from.is_decoder_only() && to.is_decoder_only()
                        }
                        None => {
                            from == to || (from.is_decoder_only() && to.is_decoder_only())
                        }
                    };
                    if !ok {
                        return Err(verr(format!(
                            "{label}: no conversion path from {} to {} (convert={:?})",
                            from.label(),
                            to.label(),
                            st.convert
                        )));
                    }
                }
            }
            prev = Some(st);
        }
        if let Some(eval) = &self.eval {
            if eval.marks.is_empty() {
                return Err(verr("eval.marks must be nonempty"));
            }
            for m in &eval.marks {
                if !(*m > 0.0 && *m <= 1.0) {
                    return Err(verr("eval.marks must lie in (0, 1]"));
                }
            }
            if let TaskSourceSpec::Files { paths } = &eval.tasks {
                if paths.is_empty() {
                    return Err(verr("eval.tasks.paths must be nonempty"));
                }
            }
        }
        Ok(())
    }

    /// Total seen-token budget across pretraining (non-MTF) stages; the axis
    /// evaluation marks are measured on.
    pub fn pretrain_budget(&self) -> u64 {
        self.stages
            .iter()
            .filter(|s| s.objective != ObjectiveSpec::Mtf)
            .map(|s| s.budget_tokens)
            .sum()
    }
}
