//! `stfm`: generate toy data, train, evaluate, forecast and inspect
//! attention. Exit codes: 0 success, 1 I/O failure, 2 usage or
//! configuration error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stfm_core::dataflow::{TOY_STEPS, TOY_VARS};
use stfm_core::forecaster::Which;
use stfm_core::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "stfm", version, about = "Spatiotemporal sequence forecasting")]
struct Cli {
    /// Seed for every random stream; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic multivariate sine dataset as CSV.
    ToyGen {
        #[arg(long, default_value_t = TOY_VARS)]
        vars: usize,
        #[arg(long, default_value_t = TOY_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write best.stfm, history.csv and report.txt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override, repeatable; applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test region of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-variable forecast mean and std for one window.
    Forecast {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First context row; defaults to forecasting past the end of the data.
        #[arg(long)]
        start: Option<usize>,
    },
    /// Export one attention matrix as CSV and optionally as a PGM image.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// First context row of the window.
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, value_parser = parse_which)]
        which: Which,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
}

fn parse_which(s: &str) -> Result<Which, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Diverged { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("STFM_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("STFM_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::ToyGen { vars, steps, out } => commands::toy_gen(vars, steps, &out),
        Command::Train { config, overrides, data, out } => {
            let mut cfg = match config {
                Some(path) => RunConfig::from_file(&path)?,
                None => RunConfig::default(),
            };
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            if let Some(d) = data {
                cfg.data = Some(d);
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            commands::train_run(&cfg)
        }
        Command::Eval { ckpt, data, out } => {
            let report = commands::eval(&ckpt, &data, out.as_deref())?;
            print!("{}", report.to_key_values());
            Ok(())
        }
        Command::Forecast { ckpt, data, out, start } => commands::forecast(&ckpt, &data, &out, start),
        Command::Attn {
            ckpt,
            data,
            window,
            layer,
            head,
            which,
            out,
            pgm,
        } => commands::attn(&commands::AttnRequest {
            ckpt: &ckpt,
            data: &data,
            window,
            layer,
            head,
            which,
            out: &out,
            pgm: pgm.as_deref(),
        })
        .map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
