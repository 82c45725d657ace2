use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use snode::error::Error;
use snode::harness::{self, ExperimentConfig};

/// Spectral neural ODE experiments.
#[derive(Parser)]
#[command(name = "snode", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method on one scenario, evaluate it and write the run artifacts.
    Run(ConfigArgs),
    /// Tabulate finished runs of one scenario and seed.
    Compare {
        /// Run directories or summary.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a scenario and write the full dataset as JSON.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    /// `key=value` overrides, applied last.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> snode::error::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("scenario", self.scenario.clone()),
            ("method", self.method.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
            ("workers", self.workers.map(|w| w.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for pair in &self.overrides {
            cfg.apply_override(pair)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn usage(err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(2)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => {
            let cfg = match args.resolve() {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            match harness::run(&cfg) {
                Ok(art) => {
                    let s = &art.summary;
                    println!("{} on {}: {}", s.method, s.scenario, s.outcome);
                    if let (Some(reason), Some(it)) = (&s.fail_reason, s.fail_iteration) {
                        println!("  failed at iteration {it}: {reason}");
                    }
                    println!("  iterations      {}", s.iterations);
                    println!("  ms/iteration    {:.3}", s.mean_ms_per_iteration);
                    println!("  final loss      {}", fmt_opt(s.final_loss));
                    println!("  test MSE        {}", fmt_opt(s.test_mse));
                    println!("  artifacts       {}", cfg.out_dir.display());
                    Ok(())
                }
                Err(e @ Error::Config(_)) => return usage(e),
                Err(e) => Err(anyhow::Error::new(e).context("run failed")),
            }
        }
        Command::Compare { runs, out } => {
            let summaries: anyhow::Result<Vec<_>> = runs
                .iter()
                .map(|p| harness::load_summary(p).with_context(|| format!("reading {}", p.display())))
                .collect();
            match summaries {
                Err(e) => return usage(format!("{e:#}")),
                Ok(summaries) => match harness::compare(&summaries) {
                    Err(e) => return usage(e),
                    Ok(rows) => {
                        print!("{}", harness::render_table(&rows));
                        match out {
                            Some(path) => harness::comparison_csv(&rows)
                                .map_err(anyhow::Error::new)
                                .and_then(|bytes| std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))),
                            None => Ok(()),
                        }
                    }
                },
            }
        }
        Command::GenData { config, out } => {
            let cfg = match config.resolve() {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            harness::gen_data(&cfg, &out)
                .map(|ds| println!("wrote {} samples x {} times to {}", ds.batch(), ds.times.len(), out.display()))
                .map_err(anyhow::Error::new)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
