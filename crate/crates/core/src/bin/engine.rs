use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use lsv_fd::experiment::{
    cmd_consistency_check, cmd_density, cmd_price, cmd_theta_sweep, write_consistency,
    write_density, write_price, write_strike_prices, write_sweep, ExperimentConfig, Format,
};
use lsv_fd::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Command {
    Price,
    Density,
    ThetaSweep,
    ConsistencyCheck,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

/// Forward/backward ADI finite-difference experiments.
#[derive(Debug, Parser)]
#[command(name = "engine", version)]
struct Args {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: OutputFormat,
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

/// `prices.csv` next to `out`, named after its stem.
fn sidecar(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "density".into());
    out.with_file_name(format!("{stem}_prices.csv"))
}

fn run(args: &Args) -> Result<(), Error> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let format = match args.format {
        OutputFormat::Csv => Format::Csv,
        OutputFormat::Json => Format::Json,
    };
    match args.command {
        Command::Price => {
            let rec = cmd_price(&cfg)?;
            write_price(&rec, format, create(&args.out)?)
        }
        Command::Density => {
            let d = cmd_density(&cfg)?;
            write_density(&d, format, create(&args.out)?)?;
            if format == Format::Csv {
                write_strike_prices(&d.prices, create(&sidecar(&args.out))?)?;
            }
            Ok(())
        }
        Command::ThetaSweep => {
            let rows = cmd_theta_sweep(&cfg)?;
            write_sweep(&rows, format, create(&args.out)?)
        }
        Command::ConsistencyCheck => {
            let r = cmd_consistency_check(&cfg)?;
            write_consistency(&r, format, create(&args.out)?)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("engine: {e}");
            if e.is_validation() || matches!(e, Error::Io(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
