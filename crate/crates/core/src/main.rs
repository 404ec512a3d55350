use std::path::PathBuf;
use std::process::ExitCode;

use avguard::harness::{self, Command, ExperimentConfig, EXIT_CONFIG};
use clap::Parser;

/// Backdoor neutralization experiments on a ring road.
#[derive(Parser)]
#[command(name = "avguard", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace a named seed, e.g. `--seed-override episode=7`. Repeatable.
    #[arg(long = "seed-override", value_name = "NAME=U64")]
    seed_override: Vec<String>,
}

fn load(cli: &Cli) -> avguard::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    for s in &cli.seed_override {
        cfg.apply_seed_override(s)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let result = load(&cli).and_then(|cfg| harness::run(cli.command, &cfg));
    match &result {
        Ok(report) => {
            for c in report.checks() {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{} artifacts in {}", report.manifest.files().len(), report.dir.display());
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(harness::exit_code(&result) as u8)
}
