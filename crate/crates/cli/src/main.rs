use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thinkact::commands::{self, apply_seed, CommandError};
use thinkact::config::RunConfig;
use thinkact::eval::{CotMode, DecodeMode};

#[derive(Parser)]
#[command(name = "thinkact", version, about = "Think-then-act policy laboratory")]
struct Cli {
    /// TOML run configuration; missing keys take the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the selected command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CotArg {
    Full,
    Mask,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeArg {
    Hybrid,
    ArEmulation,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations and the annotated dataset.
    Datagen,
    /// Supervised training on the annotated dataset.
    Sft {
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// GRPO training from an SFT checkpoint.
    Rl {
        #[arg(long)]
        init: PathBuf,
    },
    /// Greedy success-rate evaluation.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        cot_mode: Option<CotArg>,
        #[arg(long, value_enum)]
        decode_mode: Option<DecodeArg>,
    },
    /// Trace ablations of an SFT and an RL checkpoint plus latency rows.
    Ablate {
        #[arg(long)]
        sft: PathBuf,
        #[arg(long)]
        rl: PathBuf,
    },
    /// Forward-pass counts and wall-clock of action decoding.
    Latency {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Datagen => "datagen",
            Command::Sft { .. } => "sft",
            Command::Rl { .. } => "rl",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Latency { .. } => "latency",
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf, CommandError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        apply_seed(&mut cfg, cli.command.name(), seed);
    }
    let out: &Path = &cli.out;
    match cli.command {
        Command::Datagen => commands::datagen(&cfg, out),
        Command::Sft { dataset } => {
            if dataset.is_some() {
                cfg.sft.dataset = dataset;
            }
            commands::sft(&cfg, out)
        }
        Command::Rl { init } => commands::rl(&cfg, &init, out),
        Command::Eval {
            checkpoint,
            cot_mode,
            decode_mode,
        } => {
            if let Some(m) = cot_mode {
                cfg.eval.cot_mode = match m {
                    CotArg::Full => CotMode::Full,
                    CotArg::Mask => CotMode::Mask,
                    CotArg::Random => CotMode::Random,
                };
            }
            if let Some(m) = decode_mode {
                cfg.eval.decode_mode = match m {
                    DecodeArg::Hybrid => DecodeMode::Hybrid,
                    DecodeArg::ArEmulation => DecodeMode::ArEmulation,
                };
            }
            commands::eval(&cfg, &checkpoint, out)
        }
        Command::Ablate { sft, rl } => commands::ablate(&cfg, &sft, &rl, out),
        Command::Latency { checkpoint } => commands::latency(&cfg, &checkpoint, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
