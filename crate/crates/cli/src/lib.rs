//! Command implementations behind the `medgate` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use medgate::domain::validate_trace;
use medgate::sim::{run_experiment, simulate, summarize, ExperimentRow, SimConfig, SummaryCell};
use medgate::trace::{self, generate_workload, GroundTruth};
use serde::Serialize;

pub use config::{CliConfig, Overrides};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const INDEX_FILE: &str = "index.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const EXPERIMENT_CSV: &str = "experiment.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const HIT_RATIO_TABLE: &str = "hit_ratio.csv";
pub const RETRIEVAL_TIME_TABLE: &str = "retrieval_time.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("output: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Simulation(_) => 4,
            CliError::Output(_) => 5,
        }
    }
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Output(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(output_err(path))
}

fn prepare_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(output_err(out))
}

fn save_config(cfg: &CliConfig, out: &Path) -> Result<(), CliError> {
    write_file(&out.join(CONFIG_FILE), cfg.to_toml()?)
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub studies: usize,
    pub events: usize,
    pub sessions: usize,
}

/// Writes the trace, the repository index, the ground-truth labels and the
/// resolved configuration into `out`.
pub fn cmd_generate(cfg: &CliConfig, out: &Path) -> Result<GenerateSummary, CliError> {
    let w = generate_workload(&cfg.workload)
        .map_err(|e| CliError::Config(format!("[workload] {e}")))?;
    let findings = validate_trace(&w.events, &w.index);
    if !findings.is_empty() {
        return Err(CliError::Simulation(format!(
            "generated trace is inconsistent:\n{findings}"
        )));
    }
    prepare_out_dir(out)?;
    let trace_err = |e: trace::TraceError| CliError::Output(e.to_string());
    trace::write_trace(&w.events, &out.join(TRACE_FILE)).map_err(trace_err)?;
    trace::write_index(&w.index, &out.join(INDEX_FILE)).map_err(trace_err)?;
    trace::write_ground_truth(&w.labels, &out.join(GROUND_TRUTH_FILE)).map_err(trace_err)?;
    save_config(cfg, out)?;
    Ok(GenerateSummary {
        studies: w.index.len(),
        events: w.events.len(),
        sessions: w.labels.len(),
    })
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>, CliError> {
    trace::read_ground_truth(path).map_err(|e| CliError::Input(e.to_string()))
}

pub struct SimulateInputs {
    pub trace: PathBuf,
    pub index: PathBuf,
    /// Also write the message log, training log, cache dump and report of one
    /// run (largest cache fraction, first repetition).
    pub logs: bool,
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    repository_bytes: u64,
    cells: &'a [SummaryCell],
}

pub fn write_experiment_csv(rows: &[ExperimentRow], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(output_err(path))
}

pub fn read_experiment_csv(path: &Path) -> Result<Vec<ExperimentRow>, CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<ExperimentRow>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Runs the configured sweep and writes `experiment.csv`, `summary.json` and
/// the resolved configuration into `out`. Returns the rows.
pub fn cmd_simulate(
    cfg: &CliConfig,
    inputs: &SimulateInputs,
    out: &Path,
) -> Result<Vec<ExperimentRow>, CliError> {
    let input_err = |e: trace::TraceError| CliError::Input(e.to_string());
    let events = trace::read_trace(&inputs.trace).map_err(input_err)?;
    let index = trace::read_index(&inputs.index).map_err(input_err)?;
    let exp = &cfg.experiment;
    let base = cfg.sim_config();
    let report = run_experiment(
        &events,
        &index,
        &exp.cache_fractions,
        exp.repetitions,
        &base,
    )
    .map_err(|e| CliError::Simulation(e.to_string()))?;

    prepare_out_dir(out)?;
    write_experiment_csv(&report.rows, &out.join(EXPERIMENT_CSV))?;
    let doc = SummaryDoc {
        repository_bytes: report.repository_bytes,
        cells: &report.summary,
    };
    let json = serde_json::to_string_pretty(&doc).expect("summary serializes");
    write_file(&out.join(SUMMARY_JSON), json + "\n")?;
    save_config(cfg, out)?;

    if inputs.logs {
        let largest = exp.cache_fractions.iter().copied().fold(0.0, f64::max);
        let one = SimConfig {
            cache_capacity_bytes: (largest * index.total_bytes() as f64).round() as u64,
            seed: medgate::sim::derive_seed(base.seed, 0),
            ..base
        };
        let run =
            simulate(&events, &index, &one).map_err(|e| CliError::Simulation(e.to_string()))?;
        let mut buf = Vec::new();
        run.message_log
            .write_jsonl(&mut buf)
            .map_err(output_err(out))?;
        write_file(&out.join("messages.jsonl"), &buf)?;
        buf.clear();
        run.training_log
            .write_jsonl(&mut buf)
            .map_err(output_err(out))?;
        write_file(&out.join("training_log.jsonl"), &buf)?;
        buf.clear();
        run.cache.dump_jsonl(&mut buf).map_err(output_err(out))?;
        write_file(&out.join("cache_dump.jsonl"), &buf)?;
        let json = serde_json::to_string_pretty(&run.report).expect("report serializes");
        write_file(&out.join("sim_report.json"), json + "\n")?;
    }
    Ok(report.rows)
}

/// One line of an aggregated metric table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub cache_fraction: f64,
    pub config: u8,
    pub mean: f64,
    pub stddev: f64,
    pub n: usize,
}

pub fn aggregate(rows: &[ExperimentRow]) -> (Vec<SeriesPoint>, Vec<SeriesPoint>) {
    let mut cells = summarize(rows);
    cells.sort_by(|a, b| {
        a.config
            .cmp(&b.config)
            .then(a.cache_fraction.total_cmp(&b.cache_fraction))
    });
    let point = |c: &SummaryCell, m: medgate::sim::MeanStd| SeriesPoint {
        cache_fraction: c.cache_fraction,
        config: c.config,
        mean: m.mean,
        stddev: m.stddev,
        n: c.n,
    };
    (
        cells.iter().map(|c| point(c, c.hit_ratio)).collect(),
        cells
            .iter()
            .map(|c| point(c, c.retrieval_time_per_image_s))
            .collect(),
    )
}

/// Aggregates an experiment CSV into plot-ready hit-ratio and retrieval-time
/// tables, one series per configuration.
pub fn cmd_report(
    experiment_csv: &Path,
    out: &Path,
) -> Result<(Vec<SeriesPoint>, Vec<SeriesPoint>), CliError> {
    let rows = read_experiment_csv(experiment_csv)?;
    if rows.is_empty() {
        return Err(CliError::Input(format!(
            "{} holds no rows",
            experiment_csv.display()
        )));
    }
    let (hit, time) = aggregate(&rows);
    prepare_out_dir(out)?;
    for (name, table) in [(HIT_RATIO_TABLE, &hit), (RETRIEVAL_TIME_TABLE, &time)] {
        let path = out.join(name);
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
        for p in table {
            w.serialize(p)
                .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(output_err(&path))?;
    }
    Ok((hit, time))
}
