//! `adrec`: prepare data, train the three stages, evaluate, diagnose,
//! probe and export embeddings.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "adrec", version, about = "Auto-regressive diffusion sequential recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter, split and serialise a raw interaction file.
    Prepare(PrepareArgs),
    /// Run the training stages.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Embedding-collapse metrics for one or more checkpoints.
    Diagnose(DiagnoseArgs),
    /// Linear genre probe on frozen item embeddings.
    Probe(ProbeArgs),
    /// Write item embeddings as CSV.
    Export(ExportArgs),
    /// Print the effective configuration.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Raw interaction file (overrides `data.raw`).
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Output directory (overrides `data.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing dataset directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum LossArg {
    Joint,
    CeOnly,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stages to run, e.g. `1,2,3` or `3`.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub stages: Vec<u8>,
    /// Skip stages 1 and 2 and train stage 3 from a fresh initialisation.
    #[arg(long)]
    pub no_pretrain: bool,
    /// Skip stage 2; stage 3 starts from the stage-1 weights.
    #[arg(long)]
    pub no_warmup: bool,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Combine the two loss gradients with PCGrad.
    #[arg(long)]
    pub pcgrad: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Retrain stages whose checkpoint came from another configuration.
    #[arg(long)]
    pub force: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ScorerArg {
    Diffusion,
    Cam,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Cutoffs, e.g. `10,20`.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Defaults to `cam` for stage-1 checkpoints, otherwise `diffusion`.
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerArg>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path; defaults to `<checkpoint>.<split>.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write per-user ranks as CSV.
    #[arg(long)]
    pub per_user: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_conflicts_with_subcommands = true)]
pub struct DiagnoseArgs {
    #[command(subcommand)]
    pub sub: Option<DiagnoseSub>,
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "checkpoint", num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    /// Unit-normalise rows before measuring.
    #[arg(long)]
    pub normalize: bool,
    /// Write the reports as a JSON array.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum DiagnoseSub {
    /// Dump the noise schedule as CSV.
    Schedule(ScheduleArgs),
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "checkpoint", num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Genre file (overrides `data.genres`).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub common: Common,
}

fn init_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("ADREC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_threads();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
