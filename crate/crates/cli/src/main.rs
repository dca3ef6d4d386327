use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlab_cli::spec::ExperimentSpec;
use tlab_cli::{cmd_eval, cmd_inspect, cmd_matrix, cmd_report, cmd_run, MatrixSpec};
use tlab_core::error::LabError;
use tlab_core::eval::{AggregationPolicy, ScoringPolicy};
use tlab_core::Precision;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tlab",
    about = "Desk-scale transformer pretraining lab: pretrain, adapt, finetune, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment spec (TOML)
    #[arg(long)]
    spec: PathBuf,
    /// Output root directory
    #[arg(long)]
    out: PathBuf,
    /// Replace every stage/corpus/task seed with this base value
    #[arg(long)]
    seed_override: Option<u64>,
    /// Rayon thread count (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Numeric precision for parameters and activations
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "high" => Ok(Precision::High),
        "low" => Ok(Precision::Low),
        _ => Err("precision must be 'high' or 'low'".into()),
    }
}

fn parse_policy(s: &str) -> Result<AggregationPolicy, String> {
    match s {
        "median_then_mean" => Ok(AggregationPolicy::MedianThenMean),
        "single_prompt_mean" => Ok(AggregationPolicy::SinglePromptMean),
        _ => Err("policy must be 'median_then_mean' or 'single_prompt_mean'".into()),
    }
}

fn parse_scoring(s: &str) -> Result<ScoringPolicy, String> {
    match s {
        "sum_logprob" => Ok(ScoringPolicy::SumLogprob),
        "mean_logprob" => Ok(ScoringPolicy::MeanLogprob),
        _ => Err("scoring must be 'sum_logprob' or 'mean_logprob'".into()),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment spec: stages in order, metrics, checkpoints,
    /// evaluations, manifest
    Run(RunArgs),
    /// Run an architecture × objective matrix and emit a comparison table
    Matrix(RunArgs),
    /// Regenerate plot-ready TSVs from run manifests
    Report {
        /// Output directory for the TSV files
        #[arg(long)]
        out: PathBuf,
        /// Manifest files (manifest.json) of completed runs
        manifests: Vec<PathBuf>,
    },
    /// Rank-classification evaluation of an existing checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task definition files (JSON)
        tasks: Vec<PathBuf>,
        #[arg(long, default_value = "median_then_mean", value_parser = parse_policy)]
        policy: AggregationPolicy,
        #[arg(long, default_value = "sum_logprob", value_parser = parse_scoring)]
        scoring: ScoringPolicy,
        #[arg(long, default_value_t = 192)]
        max_len: usize,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump checkpoint metadata
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn apply_overrides(spec: &mut ExperimentSpec, args: &RunArgs) {
    if let Some(seed) = args.seed_override {
        for (i, st) in spec.stages.iter_mut().enumerate() {
            st.seed = seed + i as u64;
        }
        if let tlab_cli::spec::CorpusSpec::Synthetic { seed: s, .. } = &mut spec.corpus {
            *s = seed;
        }
        if let Some(eval) = &mut spec.eval {
            if let tlab_cli::spec::TaskSourceSpec::Synthetic { seed: s, .. } = &mut eval.tasks {
                *s = seed;
            }
        }
    }
    if let Some(p) = args.precision {
        spec.precision = p;
    }
}

fn is_validation_error(e: &LabError) -> bool {
    matches!(
        e,
        LabError::Validation(_) | LabError::InvalidConfig(_) | LabError::CheckpointFormat(_)
    )
}

fn fail(e: LabError) -> ExitCode {
    eprintln!("error: {e}");
    if is_validation_error(&e) {
        ExitCode::from(EXIT_VALIDATION)
    } else {
        ExitCode::from(EXIT_RUNTIME)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            init_threads(args.threads);
            let mut spec = match ExperimentSpec::load(&args.spec) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            apply_overrides(&mut spec, &args);
            if let Err(e) = spec.validate() {
                return fail(e);
            }
            match cmd_run(&spec, &args.out) {
                Ok(manifest) => {
                    println!(
                        "run {} complete: {} stages, {} steps, content hash {}",
                        manifest.name,
                        manifest.stages.len(),
                        manifest.total_steps,
                        manifest.content_hash
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Matrix(args) => {
            init_threads(args.threads);
            let spec = match MatrixSpec::load(&args.spec) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            match cmd_matrix(&spec, &args.out) {
                Ok(manifests) => {
                    println!("matrix {}: {} runs complete", spec.name, manifests.len());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { out, manifests } => match cmd_report(&manifests, &out) {
            Ok((curves, evals)) => {
                println!("wrote {} and {}", curves.display(), evals.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Eval {
            checkpoint,
            tasks,
            policy,
            scoring,
            max_len,
            out,
        } => {
            if tasks.is_empty() {
                return fail(LabError::Validation("no task files given".into()));
            }
            match cmd_eval(&checkpoint, &tasks, policy, scoring, max_len) {
                Ok(report) => {
                    let text = serde_json::to_string_pretty(&report).expect("report json");
                    match out {
                        Some(p) => {
                            if let Err(e) = std::fs::write(&p, text) {
                                return fail(e.into());
                            }
                            println!("wrote {}", p.display());
                        }
                        None => println!("{text}"),
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Inspect { checkpoint } => match cmd_inspect(&checkpoint) {
            Ok(text) => {
                println!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
