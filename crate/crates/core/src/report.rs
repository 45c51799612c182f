//! Metrics log records, log parsing, per-seed summaries and comparison reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{running_average, MetricsRecord};

pub const LOG_FORMAT: &str = "scld-metrics";
pub const LOG_VERSION: u32 = 1;

/// First line of every metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub code_version: String,
    pub config_hash: String,
    pub task: String,
    pub algorithm: String,
    pub seed: u64,
    pub target_seed: u64,
    pub sinkhorn_epsilon_factor: f64,
    pub nfe_per_iteration: usize,
    pub n_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_log_z: Option<f64>,
}

/// One training iteration. `loss` and `grad_norm` are absent when the step produced no finite value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    pub wall_seconds: f64,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub applied: bool,
    pub log_z: Option<f64>,
    pub elbo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incident: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header(LogHeader),
    Eval(MetricsRecord),
    Train(TrainRecord),
}

/// Append-only newline-delimited JSON writer, flushed after every record.
pub struct MetricsWriter {
    out: BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn write(&mut self, line: &LogLine) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// A parsed metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub header: LogHeader,
    pub evals: Vec<MetricsRecord>,
    pub train: Vec<TrainRecord>,
}

impl MetricsLog {
    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn parse(text: &str, label: &str) -> Result<Self> {
        let malformed = |line: usize, message: String| Error::MalformedLog {
            path: label.to_string(),
            line,
            message,
        };
        let mut header = None;
        let mut evals = Vec::new();
        let mut train = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(raw).map_err(|e| malformed(line_no, e.to_string()))?;
            match parsed {
                LogLine::Header(h) => {
                    if header.is_some() || line_no != 1 {
                        return Err(malformed(line_no, "header must appear exactly once, on the first line".into()));
                    }
                    if h.format != LOG_FORMAT || h.version != LOG_VERSION {
                        return Err(malformed(line_no, format!("unsupported log format {} v{}", h.format, h.version)));
                    }
                    header = Some(h);
                }
                _ if header.is_none() => return Err(malformed(line_no, "record before header".into())),
                LogLine::Eval(r) => evals.push(r),
                LogLine::Train(r) => train.push(r),
            }
        }
        let header = header.ok_or_else(|| malformed(1, "missing header".into()))?;
        Ok(Self { header, evals, train })
    }

    /// `(iteration, value)` pairs of an evaluation metric, skipping events where it is absent.
    pub fn series(&self, metric: Metric) -> Vec<(f64, f64)> {
        self.evals
            .iter()
            .filter_map(|r| metric.get(r).map(|v| (r.iteration as f64, v)))
            .collect()
    }
}

/// Evaluation metrics that can be summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Elbo,
    LogZ,
    LogZError,
    Sinkhorn,
    ModesCovered,
    ModeFraction,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Elbo,
        Metric::LogZ,
        Metric::LogZError,
        Metric::Sinkhorn,
        Metric::ModesCovered,
        Metric::ModeFraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Elbo => "elbo",
            Metric::LogZ => "log_z",
            Metric::LogZError => "log_z_error",
            Metric::Sinkhorn => "sinkhorn",
            Metric::ModesCovered => "modes_covered",
            Metric::ModeFraction => "mode_fraction",
        }
    }

    pub fn get(self, r: &MetricsRecord) -> Option<f64> {
        match self {
            Metric::Elbo => Some(r.elbo),
            Metric::LogZ => Some(r.log_z),
            Metric::LogZError => r.log_z_error,
            Metric::Sinkhorn => r.sinkhorn,
            Metric::ModesCovered => r.modes_covered.map(|c| c as f64),
            Metric::ModeFraction => r.mode_fraction,
        }
    }

    /// Direction used for "best"; `None` for metrics without one.
    pub fn higher_is_better(self) -> Option<bool> {
        match self {
            Metric::Elbo | Metric::ModesCovered | Metric::ModeFraction => Some(true),
            Metric::LogZError | Metric::Sinkhorn => Some(false),
            Metric::LogZ => None,
        }
    }
}

/// Best and final running-averaged value of each available metric for one log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best: BTreeMap<String, f64>,
    #[serde(rename = "final")]
    pub last: BTreeMap<String, f64>,
}

pub fn summarize_log(log: &MetricsLog, window: usize) -> SeedSummary {
    let mut best = BTreeMap::new();
    let mut last = BTreeMap::new();
    for metric in Metric::ALL {
        let values: Vec<f64> = log.series(metric).into_iter().map(|p| p.1).collect();
        if values.is_empty() {
            continue;
        }
        let avg = running_average(&values, window);
        last.insert(metric.name().to_string(), *avg.last().expect("non-empty"));
        if let Some(higher) = metric.higher_is_better() {
            let pick = avg.iter().copied().fold(if higher { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| {
                if higher {
                    a.max(b)
                } else {
                    a.min(b)
                }
            });
            best.insert(metric.name().to_string(), pick);
        }
    }
    SeedSummary {
        seed: log.header.seed,
        best,
        last,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub sd: f64,
    pub n: usize,
}

pub fn mean_sd(values: &[f64]) -> MeanSd {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanSd { mean, sd, n }
}

/// Mean ± s.d. across seeds of the per-seed best and final running averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub algorithm: String,
    pub config_hash: String,
    pub per_seed: Vec<SeedSummary>,
    pub best: BTreeMap<String, MeanSd>,
    #[serde(rename = "final")]
    pub last: BTreeMap<String, MeanSd>,
}

pub fn aggregate(logs: &[MetricsLog], window: usize) -> Result<Summary> {
    let first = logs.first().ok_or_else(|| Error::Config("no logs to aggregate".into()))?;
    let per_seed: Vec<SeedSummary> = logs.iter().map(|l| summarize_log(l, window)).collect();
    let collect = |pick: fn(&SeedSummary) -> &BTreeMap<String, f64>| {
        let mut out = BTreeMap::new();
        for metric in Metric::ALL {
            let vals: Vec<f64> = per_seed.iter().filter_map(|s| pick(s).get(metric.name()).copied()).collect();
            if !vals.is_empty() {
                out.insert(metric.name().to_string(), mean_sd(&vals));
            }
        }
        out
    };
    Ok(Summary {
        task: first.header.task.clone(),
        algorithm: first.header.algorithm.clone(),
        config_hash: first.header.config_hash.clone(),
        best: collect(|s| &s.best),
        last: collect(|s| &s.last),
        per_seed,
    })
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut out = format!("task {} | algorithm {} | seeds {}\n", self.task, self.algorithm, self.per_seed.len());
        for (label, table) in [("best", &self.best), ("final", &self.last)] {
            for (name, m) in table {
                let _ = writeln!(out, "{label:<6}{name:<15}{:>14.6} ± {:.6}", m.mean, m.sd);
            }
        }
        out
    }
}

/// `(x, y)` pairs for one metric of one log.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: String,
    pub series: Vec<Series>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Reads every log and builds one table row per log plus plot-ready series.
pub fn emit_report(paths: &[PathBuf], window: usize) -> Result<Report> {
    if paths.is_empty() {
        return Err(Error::Config("report needs at least one metrics log".into()));
    }
    let mut table = format!(
        "{:<4} {:<12} {:<12} {:>5} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>8}\n",
        "log", "task", "algorithm", "seed", "evals", "elbo", "best_elbo", "log_z", "log_z_error", "sinkhorn", "modes"
    );
    let mut series = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let log = MetricsLog::read(path)?;
        let s = summarize_log(&log, window);
        let h = &log.header;
        let _ = writeln!(
            table,
            "{:<4} {:<12} {:<12} {:>5} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>8}",
            i,
            h.task,
            h.algorithm,
            h.seed,
            log.evals.len(),
            cell(s.last.get("elbo").copied()),
            cell(s.best.get("elbo").copied()),
            cell(s.last.get("log_z").copied()),
            cell(s.last.get("log_z_error").copied()),
            cell(s.last.get("sinkhorn").copied()),
            s.last.get("modes_covered").map_or_else(|| "-".to_string(), |v| format!("{v:.1}")),
        );
        for metric in Metric::ALL {
            let points = log.series(metric);
            if !points.is_empty() {
                series.push(Series {
                    name: format!("log{i}_{}_vs_iteration", metric.name()),
                    points,
                });
            }
        }
        series.push(Series {
            name: format!("log{i}_elbo_vs_seconds"),
            points: log.evals.iter().map(|r| (r.wall_seconds, r.elbo)).collect(),
        });
    }
    Ok(Report { table, series })
}

/// Writes `table.txt` and one `<series>.txt` file of whitespace-separated pairs per series.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("table.txt"), &report.table)?;
    for s in &report.series {
        let mut text = String::new();
        for (x, y) in &s.points {
            let _ = writeln!(text, "{x} {y}");
        }
        std::fs::write(dir.join(format!("{}.txt", s.name)), text)?;
    }
    Ok(())
}

/// Writes one point per line, coordinates separated by single spaces.
pub fn write_points(path: &Path, points: ndarray::ArrayView2<f64>) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for row in points.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a file written by [`write_points`].
pub fn read_points(path: &Path) -> Result<ndarray::Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::MalformedLog {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if *dim.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::MalformedLog {
                path: path.display().to_string(),
                line: i + 1,
                message: "inconsistent number of columns".into(),
            });
        }
        data.extend(vals);
        rows += 1;
    }
    ndarray::Array2::from_shape_vec((rows, dim.unwrap_or(0)), data).map_err(|e| Error::Shape(e.to_string()))
}
