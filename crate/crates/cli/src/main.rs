use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use starmt::sfda::Method;
use starmt_cli::pipeline::{self, Options};
use starmt_cli::{CliError, ExperimentConfig, DESK_CONFIG};

#[derive(Parser)]
#[command(
    name = "starmt",
    version,
    about = "Source-free adaptation of a tiny video detector to degraded video"
)]
struct Cli {
    /// Experiment config (TOML) or a `run.json` record; defaults to the bundled desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `cpu`, or a GPU index.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the clean dataset.
    GenData,
    /// Write degraded copies of the clean dataset.
    Degrade,
    /// Supervised training on the clean train split.
    TrainSource,
    /// Adapt the source model to each degraded train split.
    Adapt {
        /// star_mt, basic_mt, pseudo_label or oracle; all configured methods when absent.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate every model on the test splits.
    Eval,
    /// Tables and curves from the evaluation.
    Report,
    /// Every stage in order.
    All,
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml(DESK_CONFIG)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.device != "cpu" {
        let message = match cli.device.parse::<usize>() {
            Ok(i) => format!("GPU {i} requested but this build only runs on the CPU"),
            Err(_) => format!("'{}' is neither `cpu` nor a GPU index", cli.device),
        };
        return Err(CliError::Validation {
            key: "device".into(),
            message,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("STARMT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation {
            key: "STARMT_THREADS".into(),
            message: format!("'{v}' is not a positive integer"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(starmt::Error::Aborted(e.to_string())))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    let cfg = resolve(cli)?;
    let mut opts = Options {
        force: cli.force,
        method: None,
    };
    match &cli.command {
        Command::GenData => pipeline::cmd_gen_data(&cfg, &opts).map(drop),
        Command::Degrade => pipeline::cmd_degrade(&cfg, &opts).map(drop),
        Command::TrainSource => pipeline::cmd_train_source(&cfg, &opts).map(drop),
        Command::Adapt { method } => {
            if let Some(m) = method {
                let parsed: Method =
                    m.parse().map_err(|e: starmt::Error| CliError::Validation {
                        key: "method".into(),
                        message: e.to_string(),
                    })?;
                opts.method = Some(parsed);
            }
            pipeline::cmd_adapt(&cfg, &opts).map(drop)
        }
        Command::Eval => pipeline::cmd_eval(&cfg, &opts).map(drop),
        Command::Report => pipeline::cmd_report(&cfg, &opts).map(drop),
        Command::All => pipeline::run_all(&cfg, &opts),
        Command::ShowConfig => {
            print!(
                "{}",
                toml::to_string_pretty(&cfg).expect("config serializes")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
