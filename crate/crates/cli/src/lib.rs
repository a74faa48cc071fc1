//! Helpers behind the `prefviz` binary: config assembly and cross-seed
//! aggregation of run directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prefviz_core::env::EnvKind;
use prefviz_core::orchestrator::{read_records, Method, RunConfig, RunRecord};
use prefviz_core::stats::mean_sem;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("no run directories given")]
    NoRuns,
    #[error("runs mix {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Run { path: PathBuf, source: prefviz_core::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const OUT_ENV: &str = "PREFVIZ_OUT";

/// Root for outputs when no `--out` is given.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn default_run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}-{}-seed{}", cfg.method, cfg.env, cfg.seed))
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.into(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub iteration: usize,
    pub human_seconds: f64,
    pub mean: f64,
    pub sem: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub method: Method,
    pub env: EnvKind,
    pub points: Vec<SeriesPoint>,
}

/// Per-iteration mean and SEM across seeds. Human time is averaged across
/// seeds; iterations whose averaged time does not advance replace the
/// previous point so that x stays strictly increasing.
pub fn aggregate(runs: &[(RunConfig, Vec<RunRecord>)]) -> Result<PlotSeries> {
    let (first, _) = runs.first().ok_or(CliError::NoRuns)?;
    for (cfg, _) in runs {
        if cfg.method != first.method {
            return Err(CliError::Mismatch(format!("methods {} and {}", first.method, cfg.method)));
        }
        if cfg.env != first.env {
            return Err(CliError::Mismatch(format!("envs {} and {}", first.env, cfg.env)));
        }
    }
    let len = runs.iter().map(|(_, r)| r.len()).min().unwrap_or(0);
    let mut points: Vec<SeriesPoint> = Vec::with_capacity(len);
    for i in 0..len {
        let rewards: Vec<f64> = runs.iter().map(|(_, r)| r[i].mean_reward).collect();
        let secs: Vec<f64> = runs.iter().map(|(_, r)| r[i].human_seconds).collect();
        let (mean, sem) = mean_sem(&rewards);
        let p = SeriesPoint {
            iteration: runs[0].1[i].iteration,
            human_seconds: secs.iter().sum::<f64>() / secs.len() as f64,
            mean,
            sem,
            seeds: runs.len(),
        };
        match points.last_mut() {
            Some(last) if p.human_seconds <= last.human_seconds => *last = p,
            _ => points.push(p),
        }
    }
    Ok(PlotSeries { method: first.method, env: first.env, points })
}

pub fn load_run(dir: &Path) -> Result<(RunConfig, Vec<RunRecord>)> {
    let cfg = load_config(&dir.join("config.json"))?;
    let records = read_records(&dir.join("records.csv")).map_err(|source| CliError::Run { path: dir.into(), source })?;
    Ok((cfg, records))
}

#[derive(Serialize)]
struct SeriesRow<'a> {
    method: String,
    env: &'a str,
    iteration: usize,
    human_seconds: f64,
    mean: f64,
    sem: f64,
    seeds: usize,
}

pub fn write_series(path: &Path, series: &PlotSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &series.points {
        w.serialize(SeriesRow {
            method: series.method.to_string(),
            env: series.env.name(),
            iteration: p.iteration,
            human_seconds: p.human_seconds,
            mean: p.mean,
            sem: p.sem,
            seeds: p.seeds,
        })?;
    }
    w.flush().map_err(|source| CliError::Io { path: path.into(), source })?;
    Ok(())
}
