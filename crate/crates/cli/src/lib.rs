//! Command-line pipeline: data generation or ingestion, negative mining,
//! retriever training and distillation, indexing, retrieval, reading and
//! evaluation.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{Ctx, RetrieverKind, SplitArg, Stage, Support, TrainPath, Work};
use config::ExperimentConfig;
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "dedr",
    version,
    about = "Dual-encoding dense retrieval and multi-modal reading for knowledge-based VQA"
)]
pub struct Cli {
    /// Directory holding every artifact.
    #[arg(long, global = true, default_value = "work")]
    pub work: PathBuf,
    /// TOML file with configuration keys; applied on top of the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "toy", value_parser = config::PRESETS)]
    pub preset: String,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus to <work>/data.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Copy a corpus directory in the standard layout into <work>/data.
    Ingest {
        #[arg(long)]
        src: PathBuf,
    },
    /// Store BM25 hard negatives on train and validation questions.
    MineNegatives {
        #[arg(long)]
        m: Option<usize>,
    },
    /// Train one path in isolation, or both jointly.
    TrainRetriever {
        #[arg(long, value_enum)]
        path: TrainPath,
    },
    /// Iterative teacher/student distillation between the two paths.
    Distill,
    /// Encode the collection with both paths into one flat index.
    BuildIndex {
        #[arg(long, value_enum, default_value = "distilled")]
        stage: Stage,
    },
    /// Rank the collection for every question of a split
    Retrieve {
        #[arg(long, value_enum, default_value = "dedr")]
        retriever: RetrieverKind,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        k: Option<usize>,
        /// Which encoder checkpoints dense retrievers use.
        #[arg(long, value_enum, default_value = "distilled")]
        stage: Stage,
    },
    /// Fine-tune MM-FiD on retrieved or gold supporting passages
    TrainReader {
        #[arg(long, value_enum, default_value = "retrieved")]
        support: Support,
        #[arg(long, value_enum, default_value = "dedr")]
        retriever: RetrieverKind,
    },
    /// Generate answers from the top-n passages of a run
    Answer {
        #[arg(long, value_enum, default_value = "dedr")]
        retriever: RetrieverKind,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Passages per question; defaults to the reader's setting.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Retrieval metrics, plus answer metrics when an answer file exists.
    Evaluate {
        #[arg(long, value_enum, default_value = "dedr")]
        retriever: RetrieverKind,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Hit rate and answer accuracy as a function of passages read.
    SweepK {
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "dedr")]
        retriever: RetrieverKind,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let text = match &cli.config {
        Some(path) => Some(
            std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?,
        ),
        None => None,
    };
    ExperimentConfig::load(&cli.preset, text.as_deref(), &cli.set)
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let ctx = Ctx {
        work: Work::new(&cli.work),
        cfg,
    };
    match cli.command {
        Command::GenData { seed } => ctx.gen_data(seed),
        Command::Ingest { src } => ctx.ingest(&src),
        Command::MineNegatives { m } => ctx.mine_negatives(m),
        Command::TrainRetriever { path } => ctx.train_retriever(path),
        Command::Distill => ctx.distill(),
        Command::BuildIndex { stage } => ctx.build_index(stage),
        Command::Retrieve {
            retriever,
            split,
            k,
            stage,
        } => ctx.retrieve(retriever, split.into(), k, stage),
        Command::TrainReader { support, retriever } => ctx.train_reader(support, retriever),
        Command::Answer {
            retriever,
            split,
            n,
        } => ctx.answer(retriever, split.into(), n),
        Command::Evaluate { retriever, split } => ctx.evaluate(retriever, split.into()).map(|_| ()),
        Command::SweepK {
            ks,
            retriever,
            split,
        } => ctx.sweep_k(retriever, split.into(), ks).map(|_| ()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
