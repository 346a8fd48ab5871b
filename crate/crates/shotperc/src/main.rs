//! Command line entry point: pick an experiment, layer config file and flag
//! overrides, run it, and write the CSV report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use shotperc::config::{self, ExperimentKind};
use shotperc::experiment;
use shotperc::{Error, Result};

#[derive(Parser)]
#[command(name = "shotperc", version, about = "Shot-noise field experiments")]
struct Cli {
    /// Experiment to run: marginal_clt, coupling_rate, truncation_rate,
    /// c1_tails, lc_sweep, threshold_curve, sprinkle, kesten, duality_audit.
    experiment: String,

    /// TOML config file; omitted fields take their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dotted-key override, repeatable: --set lambda=[4,16] --set kernel.beta=3.5.
    /// Overrides win over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Random seed; wins over the config file and spans the full 64-bit
    /// range (a seed in the file is limited to TOML's signed integers).
    #[arg(long)]
    seed: Option<u64>,

    /// Report path; wins over the config file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Worker threads; defaults to all cores. Output bytes do not depend on
    /// this.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

fn run(cli: Cli) -> Result<()> {
    // resolve the name first for the curated unknown-experiment message
    let kind: ExperimentKind = cli.experiment.parse()?;

    let mut table = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            config::parse_table(&text)?
        }
        None => toml::Table::new(),
    };
    table.insert("experiment".to_string(), toml::Value::String(kind.name().to_string()));
    for spec in &cli.set {
        config::apply_override(&mut table, spec)?;
    }
    let mut cfg = config::from_table(table)?;
    // flag overrides land after the TOML stage so --seed keeps its full range
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output = out;
    }
    cfg.validate()?;

    let path = experiment::run_and_write(&cfg, cli.threads)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
