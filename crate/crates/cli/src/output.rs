//! Result files: `summary.json`, `metrics.csv` and `events.jsonl`.
//!
//! Wall-clock measurements live only in the `timing` section of the summary,
//! so two runs of one configuration agree byte for byte everywhere else.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mist_core::harness::{GridFailure, GridRun, GridSummary, MetricTable, Protocol, RunRecord};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARY_FORMAT: u32 = 1;

/// JSON Schema of `summary.json`.
pub const SUMMARY_SCHEMA: &str = include_str!("../schema/summary.schema.json");

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const BUILD_ID: &str = env!("MIST_BUILD_ID");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub task: usize,
    pub scalars_selected: usize,
    pub scalars_updated_per_batch: f64,
    pub batches: usize,
    pub loss_trace: Vec<f64>,
    pub parameter_delta_norm: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub delta_p: f64,
    pub update_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub name: String,
    pub replicate: usize,
    pub seed: u64,
    pub metrics: MetricTable,
    pub zero_shot: Vec<f64>,
    pub efficiency: Efficiency,
    pub pre_adapt: Vec<AdaptSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub run_id: String,
    pub batch_time_ms: f64,
    pub pre_adapt_wall_time_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_wall_time_ms: f64,
    pub runs: Vec<RunTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: u32,
    pub version: String,
    pub build_id: String,
    pub protocol: Protocol,
    pub config: BTreeMap<String, String>,
    /// FNV-1a checksum (hex) of the backbone loaded from a checkpoint.
    pub checkpoint_checksum: Option<String>,
    pub events: String,
    pub pretrain_loss: Vec<Vec<f64>>,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<GridFailure>,
    pub grid: Vec<GridSummary>,
    pub timing: Timing,
}

pub fn run_id(run: &GridRun) -> String {
    format!("{}@{}", run.name, run.replicate)
}

impl Summary {
    pub fn new(
        record: &RunRecord,
        config: BTreeMap<String, String>,
        checkpoint_checksum: Option<u64>,
        total_wall_time_ms: f64,
    ) -> Self {
        let runs = record
            .runs
            .iter()
            .map(|run| RunSummary {
                run_id: run_id(run),
                name: run.name.clone(),
                replicate: run.replicate,
                seed: run.seed,
                metrics: run.metrics.clone(),
                zero_shot: run.zero_shot.clone(),
                efficiency: Efficiency {
                    delta_p: run.efficiency.delta_p,
                    update_flops: run.efficiency.update_flops,
                },
                pre_adapt: run
                    .reports
                    .iter()
                    .enumerate()
                    .map(|(task, r)| AdaptSummary {
                        task,
                        scalars_selected: r.scalars_selected,
                        scalars_updated_per_batch: r.scalars_updated_per_batch,
                        batches: r.batches,
                        loss_trace: r.loss_trace.clone(),
                        parameter_delta_norm: r.parameter_delta_norm,
                        warnings: r.warnings.clone(),
                    })
                    .collect(),
            })
            .collect();
        let timing = Timing {
            total_wall_time_ms,
            runs: record
                .runs
                .iter()
                .map(|run| RunTiming {
                    run_id: run_id(run),
                    batch_time_ms: run.efficiency.batch_time_ms,
                    pre_adapt_wall_time_ms: run.reports.iter().map(|r| r.wall_time_ms).collect(),
                })
                .collect(),
        };
        Self {
            format: SUMMARY_FORMAT,
            version: VERSION.into(),
            build_id: BUILD_ID.into(),
            protocol: record.protocol,
            config,
            checkpoint_checksum: checkpoint_checksum.map(|c| format!("{c:016x}")),
            events: EVENTS_FILE.into(),
            pretrain_loss: record.pretrain_loss.clone(),
            runs,
            failures: record.failures.clone(),
            grid: record.summary.clone(),
            timing,
        }
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Summary JSON with the `timing` section removed, for byte comparisons.
pub fn deterministic_part(summary_json: &str) -> Result<String, CliError> {
    let mut v: Value = serde_json::from_str(summary_json)?;
    if let Value::Object(map) = &mut v {
        map.remove("timing");
    }
    Ok(serde_json::to_string(&v)?)
}

/// Shortest decimal that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// One row per `R[t][i]`, with 1-based task indices.
pub fn metrics_csv(record: &RunRecord) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["protocol", "run_id", "t", "i", "R_ti", "A_t", "A_bar", "delta_p"])?;
    for run in &record.runs {
        let id = run_id(run);
        let m = &run.metrics;
        for (t, row) in m.r.iter().enumerate() {
            for (i, r) in row.iter().enumerate() {
                w.write_record([
                    record.protocol.as_str(),
                    &id,
                    &(t + 1).to_string(),
                    &(i + 1).to_string(),
                    &fmt_f64(*r),
                    &fmt_f64(m.a_t[t]),
                    &fmt_f64(m.a_bar),
                    &fmt_f64(run.efficiency.delta_p),
                ])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLine {
    pub run_id: String,
    pub task: usize,
    pub epoch: usize,
    pub batch: usize,
    /// Pre-adaptation loss of the batch (the MI loss unless the run uses
    /// cross-entropy).
    pub mi_loss: f64,
    pub updated_scalars: usize,
}

pub fn event_lines(record: &RunRecord) -> impl Iterator<Item = EventLine> + '_ {
    record.runs.iter().flat_map(|run| {
        let id = run_id(run);
        run.reports.iter().flat_map(move |r| {
            let id = id.clone();
            r.events.iter().map(move |e| EventLine {
                run_id: id.clone(),
                task: e.task,
                epoch: e.epoch,
                batch: e.batch,
                mi_loss: e.loss,
                updated_scalars: e.updated_scalars,
            })
        })
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes the three result files into `dir`, creating it if needed.
pub fn emit_results(record: &RunRecord, summary: &Summary, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary_path = dir.join(SUMMARY_FILE);
    fs::write(&summary_path, summary.to_json()?).map_err(io_err(&summary_path))?;
    let metrics_path = dir.join(METRICS_FILE);
    fs::write(&metrics_path, metrics_csv(record)?).map_err(io_err(&metrics_path))?;
    let events_path = dir.join(EVENTS_FILE);
    let file = fs::File::create(&events_path).map_err(io_err(&events_path))?;
    let mut w = BufWriter::new(file);
    for line in event_lines(record) {
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io_err(&events_path))?;
    }
    w.flush().map_err(io_err(&events_path))?;
    Ok(vec![summary_path, metrics_path, events_path])
}
