//! `loopseg`: operator entry points for every pipeline stage, benchmark and audit.

mod commands;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "loopseg", version, about = "Model-in-the-loop mask annotation")]
pub struct Cli {
    /// Seed for every random draw; recorded in checkpoints.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Write the JSON result here instead of printing it.
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded blob dataset (manifest, ground truth, PNGs).
    GenerateSynthetic(GenerateArgs),
    /// Annotate the seed subset from ground-truth prompts (iteration 0).
    SeedAnnotate(SeedArgs),
    /// Run one refinement iteration, or iterate until converged.
    Iterate(IterateArgs),
    /// Score prompt strategies against ground truth.
    BenchmarkPrompts(BenchArgs),
    /// Sweep the fine-box fraction over several seeds.
    FineFractions(FractionArgs),
    /// Metrics report for predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Compare the built network with its reference parameter and FLOP table.
    AuditModel(AuditArgs),
    /// Serve the review API and UI bundle.
    Serve(ServeArgs),
    /// Write labels, instances and manifest for the latest state.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub dir: PathBuf,
    /// YAML generator settings; flags override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub classes: Option<u32>,
    /// Skip rendering PNGs.
    #[arg(long)]
    pub no_images: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Dataset directory (manifest.json, ground_truth.json).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Pipeline YAML; defaults apply to absent fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SeedArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Replace an existing checkpoint directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct IterateArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Keep iterating until converged or stalled.
    #[arg(long)]
    pub until_converged: bool,
    /// Stop after this many iterations in this invocation.
    #[arg(long)]
    pub max_steps: Option<u32>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated strategies: mbb, mbb+<pct>, <k>p, <k>p<m>n.
    #[arg(long, value_delimiter = ',', default_value = "mbb,mbb+5,mbb+10,mbb+20,1p,3p4n")]
    pub strategies: Vec<String>,
    /// Oracle segmenter perturbation radius in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub noise_radius: f64,
    /// Oracle segmenter leak probability inside the prompt box.
    #[arg(long, default_value_t = 0.0)]
    pub leak: f64,
    /// Restrict to one split (train, val, test).
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct FractionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
    /// Run seeds of the sweep.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Instance file to score.
    #[arg(long, conflicts_with = "checkpoints")]
    pub predictions: Option<PathBuf>,
    /// Score the latest checkpointed state instead.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// `mask` or `box`.
    #[arg(long, default_value = "mask")]
    pub kind: String,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Network YAML, or the built-in names `reference` and `tiny`.
    #[arg(long, default_value = "reference")]
    pub config: String,
    /// Override the input size as HxW.
    #[arg(long)]
    pub input: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Built UI bundle to host at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Destination directory.
    #[arg(long)]
    pub dest: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(1)
        }
    }
}
