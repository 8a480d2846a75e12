use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use log::info;
use wtransport_cli::config::{resolve, Command, FileConfig, Overrides, DEFAULTS_HELP};
use wtransport_cli::output::emit;
use wtransport_cli::run::run;
use wtransport_cli::CliError;

/// Parallel translation and stochastic flows on the Wasserstein space over
/// the circle.
#[derive(Debug, Parser)]
#[command(name = "wtransport", version, after_help = DEFAULTS_HELP)]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    command: Command,
    /// JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Grid size, a power of two in [64, 4096].
    #[arg(long)]
    n: Option<usize>,
    /// Noise weight exponent (weights k^-q).
    #[arg(long)]
    q: Option<f64>,
    /// Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let flags = Overrides { seed: cli.seed, dt: cli.dt, n: cli.n, q: cli.q, paths: cli.paths };
    let cfg = resolve(cli.command, file, &flags)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let start = Instant::now();
    let (summary, artifacts) = run(&cfg)?;
    let written = emit(&summary, &artifacts, &cli.out)?;
    info!("wall time {:.3}s", start.elapsed().as_secs_f64());
    for p in &written {
        eprintln!("wrote {}", p.display());
    }
    for (name, ok) in &summary.checks {
        eprintln!("{} {name}", if *ok { "PASS" } else { "FAIL" });
    }
    let failed: Vec<String> = summary.checks.iter().filter(|(_, ok)| !**ok).map(|(n, _)| n.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
