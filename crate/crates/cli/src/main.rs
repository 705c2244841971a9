use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medgate_cli::{
    cmd_generate, cmd_report, cmd_simulate, CliConfig, CliError, Overrides, SimulateInputs,
    EXPERIMENT_CSV, INDEX_FILE, TRACE_FILE,
};

#[derive(Parser)]
#[command(
    name = "medgate",
    version,
    about = "Workload generator and cache simulator for a medical imaging gateway"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace, repository index and ground-truth labels.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Workload seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the cache-size sweep for configurations 1 and 2.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Trace file [default: <out>/trace.jsonl].
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Repository index [default: <out>/index.jsonl].
        #[arg(long)]
        index: Option<PathBuf>,
        /// Model seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Cache sizes as fractions of the repository, comma separated.
        #[arg(long, value_delimiter = ',')]
        cache_sizes: Option<Vec<f64>>,
        #[arg(long)]
        reps: Option<u32>,
        /// Simulate configuration 1 (LRU only) alone.
        #[arg(long)]
        no_prefetch: bool,
        /// Also write message log, training log and cache dump of one run.
        #[arg(long)]
        logs: bool,
    },
    /// Aggregate an experiment CSV into hit-ratio and retrieval-time tables.
    Report {
        /// Experiment CSV [default: <out>/experiment.csv].
        experiment_csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = CliConfig::load(config.as_deref())?.for_generate(&Overrides {
                seed,
                ..Default::default()
            })?;
            let s = cmd_generate(&cfg, &out)?;
            println!(
                "wrote {} studies, {} events, {} sessions to {}",
                s.studies,
                s.events,
                s.sessions,
                out.display()
            );
        }
        Command::Simulate {
            config,
            out,
            trace,
            index,
            seed,
            cache_sizes,
            reps,
            no_prefetch,
            logs,
        } => {
            let cfg = CliConfig::load(config.as_deref())?.for_simulate(&Overrides {
                seed,
                cache_fractions: cache_sizes,
                repetitions: reps,
                no_prefetch,
            })?;
            let inputs = SimulateInputs {
                trace: trace.unwrap_or_else(|| out.join(TRACE_FILE)),
                index: index.unwrap_or_else(|| out.join(INDEX_FILE)),
                logs,
            };
            let rows = cmd_simulate(&cfg, &inputs, &out)?;
            println!(
                "wrote {} rows to {}",
                rows.len(),
                out.join(EXPERIMENT_CSV).display()
            );
        }
        Command::Report {
            experiment_csv,
            out,
        } => {
            let csv = experiment_csv.unwrap_or_else(|| out.join(EXPERIMENT_CSV));
            let (hit, _) = cmd_report(&csv, &out)?;
            println!(
                "{:>10} {:>6} {:>10} {:>10}",
                "fraction", "config", "hit ratio", "stddev"
            );
            for p in hit {
                println!(
                    "{:>10} {:>6} {:>10.4} {:>10.4}",
                    p.cache_fraction, p.config, p.mean, p.stddev
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("medgate: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
