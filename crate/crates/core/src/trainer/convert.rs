//! Architecture conversion and the two adaptation recipes.
//!
//! Causal ↔ non-causal conversion is a pure metadata change on a shared
//! parameter layout; the optimizer state is reset at the boundary. The
//! experimental encoder-decoder → causal-decoder path keeps the full ED tree
//! and routes a stub encoder stream instead.

use crate::data::batch::ObjectiveKind;
use crate::data::corpus::Corpus;
use crate::error::{LabError, Result};
use crate::model::config::ArchitectureKind;
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::stage::{run_stage, MetricsSink, StageKind, TrainingStage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertMode {
    /// CD ↔ ND: parameters untouched, attention mask regime rewritten.
    MaskSwitch,
    /// ED → CD via an effectively empty encoder input (experimental).
    EmptyEncoderExperimental,
}

pub fn convert(
    ck: &Checkpoint,
    new_arch: ArchitectureKind,
    mode: ConvertMode,
) -> Result<Checkpoint> {
    let from = ck.meta.arch;
    let ok = match mode {
        ConvertMode::MaskSwitch => {
            from.is_decoder_only() && new_arch.is_decoder_only() && !ck.meta.empty_encoder
        }
        ConvertMode::EmptyEncoderExperimental => {
            from == ArchitectureKind::EncoderDecoder
                && new_arch == ArchitectureKind::CausalDecoder
        }
    };
    if !ok {
        return Err(LabError::NoParameterMapping {
            from: from.label().to_string(),
            to: new_arch.label().to_string(),
        });
    }
    let mut out = ck.clone();
    out.meta.arch = new_arch;
    out.optimizer_state = None;
    if mode == ConvertMode::EmptyEncoderExperimental {
        out.meta.empty_encoder = true;
    }
    Ok(out)
}

fn last_stage_matches(ck: &Checkpoint, arch: ArchitectureKind, objective: &str) -> bool {
    ck.meta
        .stage_history
        .last()
        .map(|s| s.arch == arch && s.objective == objective)
        .unwrap_or(false)
}

fn expect_stage(
    stage: &TrainingStage,
    arch: ArchitectureKind,
    objective_label: &str,
) -> Result<()> {
    let ok = stage.arch == arch
        && matches!(&stage.objective, StageKind::Pretrain { objective } if objective.label() == objective_label);
    if ok {
        Ok(())
    } else {
        Err(LabError::InvalidConfig(format!(
            "adaptation stage must be {}:{}, got {}",
            arch.label(),
            objective_label,
            stage.label()
        )))
    }
}

/// Language modeling adaptation: an MLM-pretrained non-causal decoder is
/// mask-switched to causal and extended with FLM.
pub fn adapt_lm(
    ck: &Checkpoint,
    flm_stage: &TrainingStage,
    corpus: &Corpus,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    if !last_stage_matches(ck, ArchitectureKind::NonCausalDecoder, "MLM") {
        return Err(LabError::WrongLineage {
            expected: "ND:MLM".into(),
            found: ck
                .meta
                .stage_history
                .last()
                .map(|s| s.label())
                .unwrap_or_else(|| "fresh".into()),
        });
    }
    expect_stage(flm_stage, ArchitectureKind::CausalDecoder, "FLM")?;
    let converted = convert(ck, ArchitectureKind::CausalDecoder, ConvertMode::MaskSwitch)?;
    if flm_stage.token_budget_seen == 0 {
        return Ok(converted);
    }
    run_stage(&converted, flm_stage, corpus, sink)
}

/// Non-causal MLM adaptation: an FLM-pretrained causal decoder is
/// mask-switched to non-causal and extended with MLM.
pub fn adapt_nc_mlm(
    ck: &Checkpoint,
    mlm_stage: &TrainingStage,
    corpus: &Corpus,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    if !last_stage_matches(ck, ArchitectureKind::CausalDecoder, "FLM") {
        return Err(LabError::WrongLineage {
            expected: "CD:FLM".into(),
            found: ck
                .meta
                .stage_history
                .last()
                .map(|s| s.label())
                .unwrap_or_else(|| "fresh".into()),
        });
    }
    expect_stage(mlm_stage, ArchitectureKind::NonCausalDecoder, "MLM")?;
    match &mlm_stage.objective {
        StageKind::Pretrain {
            objective: ObjectiveKind::Mlm { .. },
        } => {}
        _ => {
            return Err(LabError::InvalidConfig(
                "adapt_nc_mlm requires an MLM stage".into(),
            ))
        }
    }
    let converted = convert(ck, ArchitectureKind::NonCausalDecoder, ConvertMode::MaskSwitch)?;
    if mlm_stage.token_budget_seen == 0 {
        return Ok(converted);
    }
    run_stage(&converted, mlm_stage, corpus, sink)
}
