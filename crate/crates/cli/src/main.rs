//! `robustwarp`: train image classifiers that hold up under worst-case
//! affine transforms, attack and evaluate checkpoints, and export loss
//! landscapes. Exit codes: 0 success, 1 usage/config, 2 data/I-O, 3
//! numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use robustwarp::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "robustwarp", version, about = "Worst-case affine-transform attacks and robust training")]
struct Cli {
    /// Worker threads for per-example attacks and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the configured regime; writes checkpoint.bin and train.log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seeds: model, shuffle, and attack seeds
        /// become S, S+1, S+2.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure checkpoint accuracy under the configured evaluation modes;
    /// writes eval.csv and eval_detail.txt.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate under this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack one test example; writes original/adversarial PGMs, a
    /// transform summary, and a per-evaluation trace.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-set example index.
        #[arg(long)]
        index: usize,
        /// natural | worst-of-K | grid-AxBx... | es-N | cma-N
        #[arg(long, default_value = "grid-5x5x31")]
        mode: String,
        /// Attack RNG seed (defaults to the configured attack seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a loss grid over two free parameters around one example, or
    /// a pixel-norm grid over integer translations with --norm.
    Landscape {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-set example index.
        #[arg(long)]
        index: usize,
        /// Two free parameters, comma separated.
        #[arg(long, default_value = "du,theta")]
        axes: String,
        /// Grid points per axis, comma separated.
        #[arg(long, default_value = "13,31")]
        counts: String,
        /// Emit pixel norms over integer du,dv instead of losses: l2 | linf.
        #[arg(long)]
        norm: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve for the initial step size whose first-iterate infeasible
    /// probability mass equals EPSILON in DIMS dimensions.
    Sigma0 { epsilon: f64, dims: usize },
}

fn load_config(path: &PathBuf, out: Option<PathBuf>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = RunConfig::from_toml(&text)?;
    if let Some(dir) = out {
        config.output.dir = dir;
    }
    Ok(config)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed, out } => {
            let mut config = load_config(&config, out)?;
            if let Some(s) = seed {
                config.model.model_seed = s;
                config.model.shuffle_seed = s.wrapping_add(1);
                config.model.attack_seed = s.wrapping_add(2);
            }
            commands::cmd_train(&config)
        }
        Command::Eval { config, checkpoint, seed, out } => {
            let mut config = load_config(&config, out)?;
            if let Some(s) = seed {
                config.eval.seeds = vec![s];
            }
            commands::cmd_eval(&config, &checkpoint)
        }
        Command::Attack { config, checkpoint, index, mode, seed, out } => {
            let mut config = load_config(&config, out)?;
            if let Some(s) = seed {
                config.model.attack_seed = s;
            }
            let seed = config.model.attack_seed;
            commands::cmd_attack(&config, &checkpoint, index, &mode, seed)
        }
        Command::Landscape { config, checkpoint, index, axes, counts, norm, out } => {
            let config = load_config(&config, out)?;
            commands::cmd_landscape(&config, &checkpoint, index, &axes, &counts, norm.as_deref())
        }
        Command::Sigma0 { epsilon, dims } => commands::cmd_sigma0(epsilon, dims),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = u8::try_from(Error::exit_code(&e)).unwrap_or(1);
            ExitCode::from(code)
        }
    }
}
