//! `advmask`: explain, attack and benchmark deepfake detectors with
//! perturbation explainers.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 input not classified as fake, 4 detector failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advmask::explainers::{Method, Variant};
use advmask::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "advmask", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Explain one image; without IMAGE, a case of the synthetic suite.
    /// Uses the first configured method and variant unless given.
    Explain {
        image: Option<PathBuf>,
        #[arg(long)]
        case: Option<usize>,
    },
    /// Run the black-box attack on one image.
    Attack {
        image: Option<PathBuf>,
        #[arg(long)]
        case: Option<usize>,
    },
    /// Evaluate every method and variant over a dataset.
    Benchmark {
        /// Directory of PNG images; defaults to the configured dataset.
        dataset: Option<PathBuf>,
    },
    /// Serve the configured synthetic detector over stdin/stdout.
    ServeStub {
        #[arg(long)]
        case: Option<usize>,
    },
}

#[derive(Args)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated: lime, shap, sobol, rise.
    #[arg(long, global = true, value_delimiter = ',')]
    method: Vec<Method>,
    /// Comma-separated: classic, adv.
    #[arg(long, global = true, value_delimiter = ',')]
    variant: Vec<Variant>,
    /// Comma-separated segment counts for the evaluation attack.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Vec<usize>,
    /// Worker threads for benchmark.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if !self.variant.is_empty() {
            cfg.variants = self.variant.clone();
        }
        if !self.k.is_empty() {
            cfg.ks = self.k.clone();
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NotFake { .. } => 3,
        Error::Oracle { .. } => 4,
        Error::Io(_) | Error::Image(_) | Error::Json(_) => 1,
    }
}

fn run(cli: Cli) -> advmask::Result<()> {
    let mut cfg = match &cli.overrides.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    if !matches!(cli.command, Command::Benchmark { dataset: Some(_) }) {
        cfg.validate()?;
    } else {
        cfg.benchmark().validate()?;
    }
    match &cli.command {
        Command::Explain { image, case } => commands::cmd_explain(
            &cfg,
            image.as_deref(),
            *case,
            cfg.methods[0],
            cfg.variants[0],
        ),
        Command::Attack { image, case } => commands::cmd_attack(&cfg, image.as_deref(), *case),
        Command::Benchmark { dataset } => commands::cmd_benchmark(&cfg, dataset.as_deref()),
        Command::ServeStub { case } => commands::cmd_serve_stub(&cfg, *case),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("advmask: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
