//! `sip-reward`: batch pipelines for scoring, toy training, preference
//! pairs and trace diagnostics.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 judge backend error.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sip-reward", version, about = "Process-level reward pipelines for multiple-choice social reasoning")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Base URL of an OpenAI-compatible judge server.
    #[arg(long, global = true, env = "JUDGE_BASE_URL")]
    pub judge_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub judge_model: Option<String>,
    /// Use the seeded offline mock judge.
    #[arg(long, global = true)]
    pub mock_judge: bool,
    /// Persist judge replies under this directory.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Output file (a directory for `train-toy`); stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Log at debug level and print the resolved configuration.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Jsonl,
    Table,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score trajectories with the composite reward.
    Score(ScoreArgs),
    /// Answer accuracy overall and per ability.
    Eval(EvalArgs),
    /// Train the tabular toy policy with GRPO.
    TrainToy(TrainArgs),
    /// Build tiered preference pairs from scored segments.
    BuildPairs(PairsArgs),
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Insert distractor sentences into instance stories.
    Perturb(PerturbArgs),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSONL records `{"instance_id": ..., "output": ...}`.
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Training step that sets the curriculum weights.
    #[arg(long, default_value_t = 0)]
    pub step: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub trajectories: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training instances; a synthetic dataset is generated when omitted.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint file to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override `train.grpo.total_steps`.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// JSONL scored segments.
    #[arg(long)]
    pub segments: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SegmentationChoice {
    Quartile,
    Judge,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Option-mention density per reasoning stage.
    Density(DensityArgs),
    /// Aggregate per-stage correctness records.
    Audit(AuditArgs),
    /// Accuracy retention and length drift under perturbation.
    Robustness(RobustnessArgs),
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// One report per file, labelled by file stem.
    #[arg(long, required = true)]
    pub trajectories: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "quartile")]
    pub segmentation: SegmentationChoice,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// JSONL stage-audit records.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    /// JSONL `{"instance_id", "correct", "thinking_length"}` on the original stories.
    #[arg(long)]
    pub original: PathBuf,
    /// The same records on the perturbed stories.
    #[arg(long)]
    pub perturbed: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSONL `{"instance_id": ..., "distractors": [{"sentence": ..., "anchor": ...}]}`.
    #[arg(long)]
    pub distractors: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.global)?;
    if cli.global.verbose {
        let shown = toml::to_string(&cfg).unwrap_or_default();
        eprintln!("resolved configuration:\n{shown}");
    }
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    let out = cli.global.out.as_deref();
    match cli.command {
        Command::Score(a) => commands::score(&cfg, &a, out),
        Command::Eval(a) => commands::eval(&cfg, &a, out),
        Command::TrainToy(a) => commands::train_toy(&cfg, &a, out),
        Command::BuildPairs(a) => commands::build_pairs(&cfg, &a, out),
        Command::Analyze(AnalyzeCommand::Density(a)) => commands::density(&cfg, &a, out),
        Command::Analyze(AnalyzeCommand::Audit(a)) => commands::audit(&cfg, &a, out),
        Command::Analyze(AnalyzeCommand::Robustness(a)) => commands::robustness(&cfg, &a, out),
        Command::Perturb(a) => commands::perturb(&cfg, &a, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
