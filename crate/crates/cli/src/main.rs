use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maskcot::Result;
use maskcot_cli as cli;

/// Mask-conditioned spatio-temporal GAN with a causal optimal transport
/// objective.
///
/// Exit codes: 0 success, 2 invalid configuration or usage, 3 missing or
/// malformed data, 4 numerical failure. MASKCOT_THREADS sets the worker
/// count for evaluation and sampling; outputs do not depend on it.
#[derive(Parser)]
#[command(name = "maskcot", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic moving-blob dataset with its manifest.
    GenToy {
        /// Toy generator settings (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON config; writes checkpoints and metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Derives the init, shuffle and noise seeds as seed, seed+1, seed+2.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate sequences conditioned on the masks of a dataset.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose first `count` mask windows condition the samples.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against held-out data; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation settings (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Noise seed for the generated batches.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compose a grayscale montage from a render spec (JSON).
    Render {
        #[arg(long)]
        config: PathBuf,
        /// Output path, overriding the spec; the extension is replaced.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(args: Args) -> Result<()> {
    cli::init_threads()?;
    match args.command {
        Command::GenToy { config, seed, out } => {
            let m = cli::gen_toy(config.as_deref(), seed, &out)?;
            println!("{}: {}", out.display(), cli::manifest_summary(&m));
        }
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => {
            let cfg = cli::train_config(&config, seed, out.as_deref())?;
            cli::train(cfg, resume.as_deref(), &mut io::stderr())?;
        }
        Command::Sample {
            checkpoint,
            masks,
            count,
            seed,
            out,
        } => {
            let m = cli::sample(&checkpoint, &masks, count, seed, &out)?;
            println!("{}: {}", out.display(), cli::manifest_summary(&m));
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            seed,
            out,
        } => {
            let cfg = cli::eval_config(config.as_deref(), seed)?;
            let report = cli::eval(&checkpoint, &data, &cfg)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(p) = out {
                std::fs::write(&p, &text).map_err(|e| maskcot::Error::Io { path: p.clone(), source: e })?;
            }
            println!("{text}");
        }
        Command::Render { config, out } => {
            for p in cli::render_cmd(&config, out.as_deref())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("maskcot: {e}");
            ExitCode::from(cli::exit_code(e.kind()) as u8)
        }
    }
}
