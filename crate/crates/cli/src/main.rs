mod commands;
mod exit;
mod manifest;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Poisoning experiments on a small byte-level transformer: corpus forging,
/// continual pre-training, belief probing and reports.
///
/// Exit codes: 0 success, 1 failing oracle (verify), 2 missing or invalid
/// inputs, 3 compute failure, 4 I/O failure.
#[derive(Debug, Parser)]
#[command(name = "belief-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a mixed clean/counterfactual corpus.
    Forge(ForgeArgs),
    /// Train on a corpus, optionally continuing from a base checkpoint.
    Train(TrainArgs),
    /// Probe one checkpoint or every checkpoint of a training run.
    Probe(ProbeArgs),
    /// Aggregate probe records into the report set.
    Report(ReportArgs),
    /// Run a whole experiment file: base model, sweep and report.
    All(AllArgs),
    /// Run the oracle suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    #[arg(long)]
    pub facts: PathBuf,
    #[arg(long)]
    pub templates: PathBuf,
    #[arg(long)]
    pub poison_ratio: f64,
    /// Number of documents; defaults to the largest size the pools allow.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dedup_threshold: Option<f64>,
    #[arg(long)]
    pub max_doc_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory or `corpus.jsonl` file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint directory or directory holding `model.json`/`model.bin`.
    #[arg(long)]
    pub base_checkpoint: Option<PathBuf>,
    /// TOML file with `[model]` and `[train]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Continue from the latest checkpoint already in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// A checkpoint, a saved model, or a training output with `checkpoint-*`.
    #[arg(long)]
    pub checkpoint_dir: PathBuf,
    #[arg(long)]
    pub facts: PathBuf,
    /// `all` or a comma-separated list of format names.
    #[arg(long, default_value = "all")]
    pub formats: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Model probed as step 0, the healthy reference.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = belief_lab::probe::DEFAULT_MAX_NEW_TOKENS)]
    pub max_new_tokens: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Run name recorded in `run.json`; defaults to the directory name.
    #[arg(long)]
    pub name: Option<String>,
    /// Overrides the ratio read from the checkpoint.
    #[arg(long)]
    pub poison_ratio: Option<f64>,
    /// Overrides the learning rate read from the checkpoint.
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `records.jsonl`, a probe directory, or an experiment output; repeatable.
    #[arg(long, required = true)]
    pub records: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AllArgs {
    #[arg(long)]
    pub experiment: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probe worker threads; 0 uses every core.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Also write `verify.json` and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let result = match &cli.command {
        Command::Forge(a) => commands::forge(a),
        Command::Train(a) => commands::train(a),
        Command::Probe(a) => commands::probe(a),
        Command::Report(a) => commands::report(a),
        Command::All(a) => commands::all(a),
        Command::Verify(a) => verify::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit::code(&e) as u8)
        }
    }
}
