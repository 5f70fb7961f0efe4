//! `prune-opd`: run distillation experiments, compare runs, emit weight profiles.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prune_opd::harness::{self, ExperimentConfig};
use prune_opd::io::{read_trace_file, write_traces_with, TraceHeader};
use prune_opd::{process_rollout, Error, Result, RolloutTrace};

#[derive(Parser)]
#[command(name = "prune-opd", version, about = "Reliability-scaled on-policy distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics, profiles and summary.
    Run {
        /// Key-value or JSON config file; unset keys keep their defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate final KL and token counts; the first run is the reference.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// CSV destination; the aligned table goes to stdout.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print banded loss-weight curves for recorded steps divisible by the stride.
    Weights {
        run: PathBuf,
        #[arg(long)]
        stride: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply reliability scaling to a trace file and write the scaled traces.
    Scale {
        #[arg(long)]
        traces: PathBuf,
        /// Config file; only the `compat.*` and `reliability.*` keys matter.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_file(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            cfg.output_dir = out;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let s = harness::run(&cfg)?;
            println!(
                "final_kl {:.6} (initial {:.6}), tokens generated {}, tokens scored {}, steps {}",
                s.final_kl, s.initial_kl, s.tokens_generated, s.tokens_scored, s.steps
            );
            println!("metrics: {}", s.metrics_path.display());
        }
        Command::Compare { runs, out } => {
            let table = harness::compare(&runs)?;
            write_file(&out, &table.to_csv()?)?;
            print!("{}", table.render());
        }
        Command::Weights { run, stride, out } => {
            let csv = harness::emit_weight_profile(&run, stride)?.to_csv();
            match out {
                Some(path) => write_file(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Scale { traces, config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let file = read_trace_file(&traces)?;
            if file.header.scaled {
                return Err(Error::InvalidRecord(format!(
                    "{} already holds scaled rewards",
                    traces.display()
                )));
            }
            let scaled: Vec<RolloutTrace> = file
                .traces
                .into_iter()
                .map(|t| {
                    let (_, rewards) = process_rollout(&t, &cfg.compat, &cfg.reliability)?;
                    Ok(RolloutTrace { rewards, ..t })
                })
                .collect::<Result<_>>()?;
            let header = TraceHeader {
                scaled: true,
                ..file.header
            };
            write_traces_with(&scaled, &out, &header)?;
            log::info!("scaled {} rollouts into {}", scaled.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRUNE_OPD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
