//! `ckequant <subcommand> --config path [--set key=value ...] [--out dir]`

mod artifacts;
mod commands;
mod error;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use ckequant_core::config::ExperimentConfig;
use clap::Parser;

use crate::artifacts::{config_hash, ArtifactWriter};
use crate::commands::Subcommand;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ckequant", version, about = "Balanced metrics and coupled Kähler-Einstein quantization experiments")]
struct Args {
    #[arg(value_enum)]
    subcommand: Subcommand,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `solver.tol_res=1e-12`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; replaces `outputs` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(args: &Args) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::ConfigRead { path: args.config.display().to_string(), message: e.to_string() })?;
    let mut cfg = ExperimentConfig::from_json(&text)?.with_overrides(&args.overrides)?;
    if let Some(out) = &args.out {
        cfg.outputs = out.display().to_string();
    }
    Ok(cfg)
}

fn execute(args: &Args) -> Result<Vec<String>, CliError> {
    let cfg = load(args)?;
    let hash = config_hash(&cfg);
    let name = args.subcommand.name();
    let mut out = ArtifactWriter::new(PathBuf::from(&cfg.outputs).as_path(), name, &hash)?;
    let res = commands::run(args.subcommand, &cfg, &mut out);
    let files = out.finish(name, &hash, &cfg)?;
    res.map(|_| files)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(files) => {
            for f in files {
                println!("{f}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
