use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mislabel_forge::exec::{with_workers, Execution};
use mislabel_forge::harness::{
    run_detect, run_sweep, run_trace, write_corrupt, write_detect, write_sweep, write_trace,
};
use mislabel_forge::{Error, ExperimentConfig};

/// Synthetic label-noise experiments: corrupt, detect, sweep and trace.
#[derive(Parser)]
#[command(name = "mislabel-forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write corrupted copies of the dataset, one per seed.
    Corrupt(RunArgs),
    /// Detect label errors and score them against the injected noise.
    Detect(RunArgs),
    /// Repeat detection over the configured parameter grids.
    Sweep(RunArgs),
    /// Dump per-epoch probabilities, gradients and margins.
    Trace(RunArgs),
    /// Print the fully resolved configuration.
    PrintConfig(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 or unset uses every core.
    #[arg(long, env = "MISLABEL_FORGE_JOBS")]
    jobs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report_written(files: &[PathBuf]) {
    for f in files {
        log::info!("wrote {}", f.display());
    }
}

type Job = fn(&ExperimentConfig, &Path) -> Result<(), Error>;

fn run(command: Command) -> Result<(), Error> {
    let (args, job): (RunArgs, Job) = match command {
        Command::PrintConfig(args) => {
            print!("{}", args.resolve()?.to_toml());
            return Ok(());
        }
        Command::Corrupt(args) => (args, |cfg, out| {
            report_written(&write_corrupt(cfg, out)?);
            Ok(())
        }),
        Command::Detect(args) => (args, |cfg, out| {
            let report = run_detect(cfg, Execution::Parallel)?;
            let f1 = &report.aggregate.f1;
            println!("F1 {:.4} ± {:.4} (sem) over {} seeds", f1.mean, f1.sem, f1.values.len());
            report_written(&write_detect(&report, out)?);
            Ok(())
        }),
        Command::Sweep(args) => (args, |cfg, out| {
            let report = run_sweep(cfg, Execution::Parallel)?;
            for p in &report.points {
                println!(
                    "{}={} eta={}: F1 {:.4} ± {:.4}",
                    p.point.param_name, p.point.param_value, p.point.eta, p.aggregate.f1.mean, p.aggregate.f1.sem
                );
            }
            report_written(&write_sweep(&report, out)?);
            Ok(())
        }),
        Command::Trace(args) => (args, |cfg, out| {
            let report = run_trace(cfg, Execution::Parallel)?;
            report_written(&write_trace(&report, out)?);
            Ok(())
        }),
    };
    let cfg = args.config.resolve()?;
    let jobs = args.jobs.filter(|&n| n > 0);
    with_workers(jobs, || job(&cfg, &args.out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(inner) = source {
                eprintln!("  caused by: {inner}");
                source = inner.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
