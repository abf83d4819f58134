use std::path::PathBuf;
use std::process::ExitCode;

use bisup::analyzer::{self, Command, ReportFormat, RunConfig};
use bisup::Error;
use clap::Parser;

#[derive(Parser)]
#[command(
    name = "bisup",
    version,
    about = "Quantization error-suppression experiments on a toy transformer"
)]
struct Cli {
    /// synth, calibrate, trace, ablate, sweep or gradcheck
    command: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Quantization spec such as W3A3-g16
    #[arg(long)]
    spec: Option<String>,
    /// Report path; a .csv or .json extension selects the format
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn configure(cli: Cli) -> bisup::Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    cfg.command = Some(cli.command.parse::<Command>()?);
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(spec) = cli.spec {
        cfg.spec = spec.parse()?;
    }
    if let Some(out) = cli.out {
        match out.extension().and_then(|e| e.to_str()) {
            Some("csv") => cfg.format = ReportFormat::Csv,
            Some("json") => cfg.format = ReportFormat::Json,
            _ => {}
        }
        cfg.out = Some(out);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure(cli).and_then(|cfg| analyzer::run(&cfg).map(|r| (cfg, r))) {
        Ok((cfg, _)) => {
            if let Ok(p) = cfg.report_path() {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bisup: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
