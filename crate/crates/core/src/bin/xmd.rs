use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xmd_core::cli::{cmd_eval, cmd_scenegen, cmd_train, Protocol, TrainMode};
use xmd_core::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "xmd", version = xmd_core::VERSION, about = "Image-to-LiDAR knowledge distillation experiments")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (dataset directory for `scenegen`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory read by `train` and `eval`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `section.key=value` overrides, applied after the file.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Overwrite existing output.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired camera/LiDAR dataset.
    Scenegen,
    /// Run a trainer.
    Train {
        #[arg(long, value_enum)]
        mode: TrainMode,
        /// Continue an interrupted run from its last epoch.
        #[arg(long)]
        resume: bool,
    },
    /// Run an evaluation protocol.
    Eval {
        #[arg(long, value_enum)]
        protocol: Protocol,
    },
}

fn load_config(cli: &Cli) -> xmd_core::Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        if !matches!(cli.command, Command::Scenegen) {
            overrides.push(format!("out_dir={:?}", out.display().to_string()));
        }
    }
    if let Some(data) = &cli.data {
        overrides.push(format!("data_dir={:?}", data.display().to_string()));
    }
    match &cli.config {
        Some(path) => ExperimentConfig::from_file(path, &overrides),
        None => ExperimentConfig::from_toml_with_overrides("", &overrides),
    }
}

fn run(cli: &Cli) -> xmd_core::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Scenegen => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            cmd_scenegen(&cfg, &out, cli.force)?;
        }
        Command::Train { mode, resume } => {
            let report = cmd_train(&cfg, *mode, *resume, cli.force)?;
            println!("{} final loss {:.6}", report.kind, report.final_loss().unwrap_or(f64::NAN));
        }
        Command::Eval { protocol } => {
            for path in cmd_eval(&cfg, *protocol)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("XMD_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            _ => {
                eprintln!("error: XMD_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
