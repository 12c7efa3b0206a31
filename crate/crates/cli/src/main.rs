use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "fedvocab", version, about = "Federated closed-vocabulary language models with per-client OOV expansion")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Experiment config (JSON); `FEDVOCAB_*` environment variables override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Corpus JSONL; the synthetic generator from the config is used when absent.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub split_seed: Option<u64>,
    /// Train,validation,test client fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long, global = true)]
    pub pool_ratios: Option<String>,
    /// Reseeds every stochastic stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    AsUnk,
    Oracle,
    Expansion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSegment {
    /// Every sentence of each client.
    All,
    /// The held-out personalization test segment.
    PersonalizeTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    Train,
    Validation,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic long-tail corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the closed vocabulary (and its oracle expansion) from the train pool.
    BuildVocab {
        #[arg(long)]
        out: PathBuf,
        /// Words in the closed vocabulary, specials excluded.
        #[arg(long)]
        size: Option<usize>,
        /// Extra words for the oracle vocabulary; 0 skips it.
        #[arg(long)]
        oracle_extra: Option<usize>,
    },
    /// Centralized next-word training on every sentence of the corpus.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary file; built from the train pool when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Federated training with FedAdam.
    FlTrain {
        #[arg(long)]
        out: PathBuf,
        /// Starting model checkpoint; otherwise initialize and pretrain per the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Vocabulary file, used when no checkpoint is given.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// `oracle` trains on the expanded vocabulary.
        #[arg(long, value_enum, default_value = "as-unk")]
        strategy: StrategyArg,
        /// Named learning-rate preset, e.g. `reddit-as-unk`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Personalize every test client.
    Personalize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Train only the adapter under expansion.
        #[arg(long)]
        freeze_base: bool,
        /// Expansion without an adapter.
        #[arg(long)]
        identity_adapter: bool,
        /// Also write each client's personalized model.
        #[arg(long)]
        save_models: bool,
    },
    /// Evaluate a model checkpoint on a pool.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        pool: PoolArg,
        #[arg(long, value_enum, default_value = "all")]
        segment: EvalSegment,
    },
    /// One CSV row per personalization run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Word-frequency quantiles of the top-ranked words.
    PlotTail {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        top_k: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.25,0.5,0.75,0.9,1")]
        quantiles: Vec<f64>,
    },
    /// Sweep client and server learning rates for federated training.
    GridSearch {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        client_lrs: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        server_lrs: Option<Vec<f64>>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli.global, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
