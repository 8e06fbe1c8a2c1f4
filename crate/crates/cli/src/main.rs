use std::path::PathBuf;
use std::process::ExitCode;

use anchornet::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "anchornet",
    version,
    about = "Anchor filter learning and dense semantic matching"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairs {
    Intra,
    Cross,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dsp,
    Nam,
    Noflow,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic correspondence benchmark.
    GenData,
    /// Warm up, train both stages and write checkpoints and loss logs.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write dense descriptor fields for the images of the evaluation pairs.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// anet-class (each image's own class), anet-class:<c>, anet-agnostic, hc or raw.
        #[arg(long, default_value = "anet-agnostic")]
        variant: String,
        /// Class bank for `--variant anet-class`.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, value_enum, default_value = "intra")]
        pairs: Pairs,
    },
    /// Match the evaluation pairs and write flow fields.
    Match {
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `extract` (not needed for noflow).
        #[arg(long)]
        descriptors: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dsp")]
        method: Method,
        #[arg(long, value_enum, default_value = "intra")]
        pairs: Pairs,
    },
    /// Score flow fields with PCK and weighted IoU.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `match`.
        #[arg(long)]
        flows: PathBuf,
        /// PCK tolerance; repeatable (defaults to the config's list).
        #[arg(long)]
        alpha: Vec<f64>,
        /// Checkpoint used to render class heatmaps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of source images whose class heatmaps are written as PGM.
        #[arg(long, default_value_t = 0)]
        heatmaps: usize,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck,
    /// Train and evaluate over three seeds and score every acceptance criterion.
    Bench {
        /// Previous bench output whose metric files must match byte-for-byte.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

/// Failure of a command that ran to completion but whose checks did not pass.
#[derive(Debug)]
pub struct ChecksFailed(pub String);

pub enum Failure {
    Core(Error),
    Checks(ChecksFailed),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
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
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ANCHOR_MATCH_LOG", "info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.global.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::GenData => commands::gen_data(g),
        Command::Train { data } => commands::train(g, &data),
        Command::Extract {
            data,
            checkpoint,
            variant,
            class,
            pairs,
        } => commands::extract(g, &data, &checkpoint, &variant, class, pairs),
        Command::Match {
            data,
            descriptors,
            method,
            pairs,
        } => commands::match_pairs(g, &data, descriptors.as_deref(), method, pairs),
        Command::Eval {
            data,
            flows,
            alpha,
            checkpoint,
            heatmaps,
        } => commands::eval(g, &data, &flows, &alpha, checkpoint.as_deref(), heatmaps),
        Command::Gradcheck => commands::gradcheck(g),
        Command::Bench { compare } => commands::bench(g, compare.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Checks(ChecksFailed(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
