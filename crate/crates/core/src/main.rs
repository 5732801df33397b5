use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rampsafe::config::{Mode, RunConfig};

#[derive(Parser)]
#[command(name = "rampsafe", version, about = "Safe ramp-merging simulator and trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one mode with a TOML config.
    Run {
        mode: Mode,
        /// Config file; defaults apply to every missing key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Apply the CI profile (smaller networks, fewer episodes and epochs).
        #[arg(long)]
        ci: bool,
        /// Actor checkpoint for eval mode.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write plot-ready CSV series for a finished run directory.
    PlotData { run_dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RAMPSAFE_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            mode,
            config,
            seed,
            out,
            ci,
            checkpoint,
        } => (|| {
            let mut cfg = match &config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if ci || cfg.ci {
                cfg.apply_ci_profile();
            }
            if checkpoint.is_some() {
                cfg.online.checkpoint = checkpoint;
            }
            rampsafe::train::run(mode, &cfg, &out)
        })(),
        Command::PlotData { run_dir } => rampsafe::plot::emit_plot_data(&run_dir).map(|s| {
            log::info!("plot series for {} episodes", s.episodes);
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
