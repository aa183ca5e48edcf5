use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sure_core::Error;

mod commands;

/// View repair, frontal-guided resampling, token-sensitive loss weighting and
/// prior-report filtering for chest X-ray report generation.
#[derive(Parser, Debug)]
#[command(name = "sure", version, about)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resolve view tags and write the repaired corpus plus an audit trail.
    RepairViews(RepairArgs),
    /// Filter prior-report sentences against each study's images.
    CefFilter(CefArgs),
    /// Compute per-token loss weights for every current report.
    TslWeights(TslArgs),
    /// Fuse frontal and lateral tokens into fixed-size visual features.
    FavrFuse(FuseArgs),
    /// Run the full pipeline from a JSON config.
    Run(RunArgs),
    /// Finite-difference check of the attention and fusion gradients.
    Gradcheck(GradArgs),
    /// Desk-scale experiments on synthetic data.
    #[command(subcommand)]
    Lab(LabCommand),
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    /// JSONL corpus, one study per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory holding EMB1 files (defaults to the corpus directory).
    #[arg(long)]
    pub emb_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PolicyArgs {
    /// JSON repair policy; flags below override its fields.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub theta_assign: Option<f64>,
    #[arg(long)]
    pub theta_override: Option<f64>,
    #[arg(long, value_enum)]
    pub fallback: Option<FallbackArg>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum FallbackArg {
    ExcludeImage,
    TreatAsFrontal,
}

#[derive(Args, Debug)]
pub struct RepairArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Repaired corpus; excluded images are dropped.
    #[arg(long)]
    pub out: PathBuf,
    /// One JSON line per input image.
    #[arg(long)]
    pub audit: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ModeArg {
    None,
    Fixed,
    Dynamic,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ScopeArg {
    VanishedOnly,
    AllPrior2,
}

#[derive(Args, Debug)]
pub struct CefArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, value_enum, default_value = "dynamic")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.22)]
    pub tau: f64,
    /// Stricter threshold for older-prior sentences about vanished findings.
    #[arg(long, default_value_t = 0.30)]
    pub tau_high: f64,
    #[arg(long, value_enum, default_value = "vanished-only")]
    pub strict_scope: ScopeArg,
    /// Keep sentences without any positive finding.
    #[arg(long)]
    pub no_positive_gate: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum NormArg {
    Batch,
    Corpus,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum CountingArg {
    Report,
    Sentence,
}

#[derive(Args, Debug)]
pub struct TslArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Frequency table to use instead of counting the corpus.
    #[arg(long)]
    pub freq: Option<PathBuf>,
    /// Write the frequency table used.
    #[arg(long)]
    pub write_freq: Option<PathBuf>,
    /// JSON tier config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub t1: Option<u64>,
    #[arg(long)]
    pub t2: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum, default_value = "batch")]
    pub scope: NormArg,
    /// Reports per normalization batch under `--scope batch`.
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "report")]
    pub counting: CountingArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum InitArg {
    Gaussian,
    Identity,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Seed for parameter initialization.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub n_queries: usize,
    #[arg(long, default_value_t = 16)]
    pub out_dim: usize,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub init: InitArg,
    #[arg(long)]
    pub share_lateral: bool,
    /// Resampler parameters as JSON, replacing the seeded initialization.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's worker count.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum OpArg {
    All,
    CrossAttend,
    FavrFuse,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    /// First seed; seeds `seed..seed+seeds` are checked.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, value_enum, default_value = "all")]
    pub op: OpArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum LabCommand {
    /// Train CE and weighted-loss toy models and compare per-finding F1.
    Imbalance(LabArgs),
    /// Stale and relevant retention under each filter mode.
    FilterAblation(LabArgs),
    /// Write the synthetic corpus, embeddings and ground truth.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
pub struct LabArgs {
    /// Lab config JSON (defaults used when absent).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the corpus seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Exit code 1 for bad input or configuration, 2 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::ParseError { .. }
        | Error::CorpusRejected { .. }
        | Error::InvalidRecord(_)
        | Error::InvalidLabelCode { .. }
        | Error::LabelLength(_)
        | Error::FormatError(_)
        | Error::TruncationError { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SURE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::RepairViews(a) => commands::repair_views(a),
        Command::CefFilter(a) => commands::cef_filter(a),
        Command::TslWeights(a) => commands::tsl_weights(a),
        Command::FavrFuse(a) => commands::favr_fuse(a),
        Command::Run(a) => commands::run(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Lab(LabCommand::Imbalance(a)) => commands::lab_imbalance(a),
        Command::Lab(LabCommand::FilterAblation(a)) => commands::lab_filter_ablation(a),
        Command::Lab(LabCommand::Generate(a)) => commands::lab_generate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
