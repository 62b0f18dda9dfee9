//! `hssn`: generate data, train, evaluate and query hybrid style siamese
//! models from the command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration or argument error,
//! 3 data error, 4 numerical abort during training.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hssn_core::ErrorClass;

#[derive(Parser)]
#[command(name = "hssn", version, about = "Hybrid style siamese network for complementary-item retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Training settings shared by `train`, `init` and `experiment`.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON config with optional `model`, `loss` and training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    triplets_per_epoch: Option<usize>,
    #[arg(long)]
    w1: Option<f32>,
    #[arg(long)]
    w2: Option<f32>,
    /// Number of cross-validation folds.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural texture dataset and print its manifest path.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        outfits: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        families: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a freshly initialized checkpoint.
    Init {
        #[command(flatten)]
        settings: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one fold (or on every outfit when --fold is omitted).
    Train {
        #[command(flatten)]
        settings: Overrides,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        /// Directory for checkpoints and the metric log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a fold's test outfits (or all outfits).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        /// Seed and fold count used to recompute the split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Model config the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export eval-mode embeddings for every manifest item.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the complementary-category items closest to a query.
    Retrieve {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Cross-validated hybrid vs. baseline comparison.
    Experiment {
        #[command(flatten)]
        settings: Overrides,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Results table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<hssn_core::Error>());
    match core.map(hssn_core::Error::class) {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Data) => 3,
        Some(ErrorClass::Numerical) => 4,
        Some(ErrorClass::Io) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth {
            out,
            outfits,
            size,
            families,
            seed,
        } => commands::gen_synth(&out, outfits, size, families, seed),
        Command::Init { settings, out } => commands::init(&settings, &out),
        Command::Train {
            settings,
            manifest,
            fold,
            out,
        } => commands::train(&settings, &manifest, fold, &out),
        Command::Eval {
            ckpt,
            manifest,
            fold,
            seed,
            k,
            config,
            out,
        } => commands::eval(&ckpt, &manifest, fold, seed, k, config.as_deref(), &out),
        Command::Embed {
            ckpt,
            manifest,
            out,
        } => commands::embed(&ckpt, &manifest, &out),
        Command::Retrieve {
            embeddings,
            query,
            k,
        } => commands::retrieve(&embeddings, &query, k),
        Command::Experiment {
            settings,
            manifest,
            seeds,
            jobs,
            out,
        } => commands::experiment(&settings, &manifest, &seeds, jobs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
