//! Plot-ready data extraction from run manifests.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use tlab_core::error::{LabError, Result};
use tlab_core::eval::EvalReport;
use tlab_core::trainer::ValPoint;

use crate::run::RunManifest;

#[derive(Deserialize)]
struct MetricsLine {
    kind: String,
    data: serde_json::Value,
}

/// Emits two TSV files: per-run validation-loss series (stage-local and
/// cumulative token axes, so adapted runs can be overlaid on from-scratch
/// ones) and per-evaluation aggregates with spread and baseline.
/// Regeneration from unchanged manifests is byte-identical.
pub fn cmd_report(manifest_paths: &[PathBuf], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if manifest_paths.is_empty() {
        return Err(LabError::Validation("no manifests given".into()));
    }
    let mut missing: Vec<String> = Vec::new();
    let mut manifests: Vec<RunManifest> = Vec::new();
    for p in manifest_paths {
        if !p.exists() {
            missing.push(p.display().to_string());
            continue;
        }
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        for f in m
            .stages
            .iter()
            .flat_map(|s| [s.checkpoint.clone(), s.metrics.clone()])
            .chain(m.evals.iter().map(|e| e.report.clone()))
        {
            if !Path::new(&f).exists() {
                missing.push(f);
            }
        }
        manifests.push(m);
    }
    if !missing.is_empty() {
        return Err(LabError::Validation(format!(
            "missing files: {}",
            missing.join(", ")
        )));
    }

    std::fs::create_dir_all(out_dir)?;
    let mut curves = String::from(
        "run\tstage_index\tstage_label\ttokens_into_stage\tcumulative_tokens_seen\tval_loss\n",
    );
    for m in &manifests {
        for s in &m.stages {
            let text = std::fs::read_to_string(&s.metrics)?;
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: MetricsLine = serde_json::from_str(line)?;
                if rec.kind != "validation" {
                    continue;
                }
                let v: ValPoint = serde_json::from_value(rec.data)?;
                curves.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    m.name,
                    s.index,
                    s.label,
                    v.tokens_seen,
                    s.cumulative_tokens_before + v.tokens_seen,
                    v.val_loss
                ));
            }
        }
    }
    let curves_path = out_dir.join("val_loss_curves.tsv");
    std::fs::write(&curves_path, curves)?;

    let mut evals =
        String::from("run\tmark_tokens\tpolicy\taggregate\tmin\tmax\tbaseline\tscoring\n");
    for m in &manifests {
        for e in &m.evals {
            let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&e.report)?)?;
            let all: Vec<f64> = report
                .tasks
                .iter()
                .flat_map(|t| t.per_prompt.iter().copied())
                .collect();
            let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            evals.push_str(&format!(
                "{}\t{}\t{:?}\t{}\t{}\t{}\t{}\t{:?}\n",
                m.name,
                e.mark_tokens,
                report.policy,
                report.aggregate,
                min,
                max,
                report.random_baseline,
                report.scoring_policy
            ));
        }
    }
    let evals_path = out_dir.join("eval_aggregates.tsv");
    std::fs::write(&evals_path, evals)?;
    Ok((curves_path, evals_path))
}
