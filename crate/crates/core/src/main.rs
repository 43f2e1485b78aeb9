use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use valsynth::cli::{cmd_audit, cmd_cycle, cmd_metrics, cmd_synth, cmd_validate, Manifest, RunConfig};

#[derive(Parser)]
#[command(name = "valsynth", version, about = "Private cohort sharing, validation and privacy auditing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Release the DP summary and write a synthetic cohort.
    Synth(Common),
    /// Run validation requests on the real cohort and optionally a synthetic one.
    Validate {
        #[command(flatten)]
        common: Common,
        /// JSON list of requests; defaults to `requests` in the config.
        #[arg(long)]
        requests: Option<PathBuf>,
        /// Synthetic cohort to compare against (`.json` tensor or long csv).
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Shadow-dataset membership-inference audit of the requests.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        requests: Option<PathBuf>,
    },
    /// AJS of a synthetic cohort and optional EPrec aggregation.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        synthetic: PathBuf,
        /// Method name written to the AJS table.
        #[arg(long, default_value = "statistical")]
        method: String,
        /// JSON list of EPrec records.
        #[arg(long)]
        eprec: Option<PathBuf>,
    },
    /// Multi-cycle synthesis with feedback, validation and auditing.
    Cycle(Common),
}

fn load(common: &Common) -> valsynth::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> valsynth::Result<Manifest> {
    match cli.command {
        Command::Synth(c) => cmd_synth(&load(&c)?),
        Command::Validate { common, requests, synthetic } => {
            cmd_validate(&load(&common)?, requests.as_deref(), synthetic.as_deref())
        }
        Command::Audit { common, requests } => cmd_audit(&load(&common)?, requests.as_deref()),
        Command::Metrics { common, synthetic, method, eprec } => {
            cmd_metrics(&load(&common)?, &synthetic, &method, eprec.as_deref())
        }
        Command::Cycle(c) => cmd_cycle(&load(&c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(manifest) => {
            println!("{} files written (config {})", manifest.files.len(), &manifest.config_hash[..12]);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
