//! Plasticity and return instrumentation, CSV persistence and multi-seed reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::netcore::{MaskedNetwork, NetError};
use crate::scalar::Scalar;

pub const CSV_HEADER: &str =
    "step,eval_return,actor_act_ratio,critic_act_ratio,actor_density,critic_density,grow_count,prune_count,epsilon,task_index,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("probe batch is empty")]
    EmptyProbe,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("{path}: header does not match `{expected}`")]
    Header { path: PathBuf, expected: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no run directories to aggregate")]
    NoRuns,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    /// One ratio per hidden layer.
    pub per_layer: Vec<f64>,
    /// Neuron-count weighted mean over hidden layers.
    pub aggregate: f64,
}

/// Fraction of hidden neurons whose post-activation exceeds `tau` on at least one probe input.
pub fn activated_ratio<S: Scalar>(net: &MaskedNetwork<S>, probe: ArrayView2<'_, S>, tau: f64) -> Result<ActivationStats, MetricsError> {
    if probe.nrows() == 0 {
        return Err(MetricsError::EmptyProbe);
    }
    let (_, cache) = net.forward(probe)?;
    let tau = S::of(tau);
    let hidden = &cache.post[..net.layers.len() - 1];
    let mut active_total = 0usize;
    let mut neurons = 0usize;
    let per_layer = hidden
        .iter()
        .map(|post| {
            let active = post
                .columns()
                .into_iter()
                .filter(|col| col.iter().any(|&h| h > tau))
                .count();
            active_total += active;
            neurons += post.ncols();
            active as f64 / post.ncols() as f64
        })
        .collect();
    let aggregate = if neurons == 0 { 1.0 } else { active_total as f64 / neurons as f64 };
    Ok(ActivationStats { per_layer, aggregate })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub eval_return: f64,
    pub actor_act_ratio: f64,
    pub critic_act_ratio: f64,
    pub actor_density: f64,
    pub critic_density: f64,
    /// Connections grown since the previous row, summed over actor and critics.
    pub grow_count: u64,
    pub prune_count: u64,
    pub epsilon: f64,
    pub task_index: usize,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.eval_return,
            self.actor_act_ratio,
            self.critic_act_ratio,
            self.actor_density,
            self.critic_density,
            self.grow_count,
            self.prune_count,
            self.epsilon,
            self.task_index,
            self.wall_ms
        )
    }

    fn parse(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(format!("expected 11 fields, found {}", f.len()));
        }
        fn p<T: std::str::FromStr>(s: &str, name: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("bad {name} `{s}`"))
        }
        Ok(Self {
            step: p(f[0], "step")?,
            eval_return: p(f[1], "eval_return")?,
            actor_act_ratio: p(f[2], "actor_act_ratio")?,
            critic_act_ratio: p(f[3], "critic_act_ratio")?,
            actor_density: p(f[4], "actor_density")?,
            critic_density: p(f[5], "critic_density")?,
            grow_count: p(f[6], "grow_count")?,
            prune_count: p(f[7], "prune_count")?,
            epsilon: p(f[8], "epsilon")?,
            task_index: p(f[9], "task_index")?,
            wall_ms: p(f[10], "wall_ms")?,
        })
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<(), MetricsError> {
    fs::write(path, rows_to_csv(rows)).map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(MetricsError::Header {
            path: path.to_path_buf(),
            expected: CSV_HEADER.into(),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            MetricsRow::parse(l).map_err(|message| MetricsError::Format {
                path: path.to_path_buf(),
                line: i + 2,
                message,
            })
        })
        .collect()
}

/// Sample mean and standard deviation (`n - 1` denominator; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rows in the last 10% of a run (at least one).
pub fn final_window(rows: &[MetricsRow]) -> &[MetricsRow] {
    let n = rows.len().div_ceil(10).max(1).min(rows.len());
    &rows[rows.len() - n..]
}

/// Means of eval return and critic activated ratio over the final window.
pub fn final_summary(rows: &[MetricsRow]) -> (f64, f64) {
    let w = final_window(rows);
    let ret: Vec<f64> = w.iter().map(|r| r.eval_return).collect();
    let act: Vec<f64> = w.iter().map(|r| r.critic_act_ratio).collect();
    (mean_std(&ret).0, mean_std(&act).0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportLine {
    pub label: String,
    pub runs: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub critic_ratio_mean: f64,
    pub critic_ratio_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub lines: Vec<ReportLine>,
}

impl Report {
    /// Groups `(label, rows)` pairs in first-seen label order.
    pub fn from_runs(runs: &[(String, Vec<MetricsRow>)]) -> Self {
        let mut labels: Vec<&str> = Vec::new();
        for (l, _) in runs {
            if !labels.contains(&l.as_str()) {
                labels.push(l);
            }
        }
        let lines = labels
            .into_iter()
            .map(|label| {
                let finals: Vec<(f64, f64)> = runs
                    .iter()
                    .filter(|(l, rows)| l == label && !rows.is_empty())
                    .map(|(_, rows)| final_summary(rows))
                    .collect();
                let rets: Vec<f64> = finals.iter().map(|f| f.0).collect();
                let acts: Vec<f64> = finals.iter().map(|f| f.1).collect();
                let (return_mean, return_std) = mean_std(&rets);
                let (critic_ratio_mean, critic_ratio_std) = mean_std(&acts);
                ReportLine {
                    label: label.to_string(),
                    runs: finals.len(),
                    return_mean,
                    return_std,
                    critic_ratio_mean,
                    critic_ratio_std,
                }
            })
            .collect();
        Self { lines }
    }

    pub fn line(&self, label: &str) -> Option<&ReportLine> {
        self.lines.iter().find(|l| l.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,runs,return_mean,return_std,critic_act_ratio_mean,critic_act_ratio_std\n");
        for l in &self.lines {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                l.label, l.runs, l.return_mean, l.return_std, l.critic_ratio_mean, l.critic_ratio_std
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>5} {:>24} {:>24}\n",
            "label", "runs", "final return", "critic act. ratio"
        );
        for l in &self.lines {
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>24} {:>24}",
                l.label,
                l.runs,
                format!("{:.3} ± {:.3}", l.return_mean, l.return_std),
                format!("{:.4} ± {:.4}", l.critic_ratio_mean, l.critic_ratio_std)
            );
        }
        out
    }

    /// Writes `report.csv` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), MetricsError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(io_err(&csv))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, self.to_text()).map_err(io_err(&txt))
    }
}

/// Loads every run directory (metrics plus echoed config) and summarizes per label.
pub fn aggregate_report(run_dirs: &[PathBuf]) -> Result<Report, MetricsError> {
    if run_dirs.is_empty() {
        return Err(MetricsError::NoRuns);
    }
    let runs = run_dirs
        .iter()
        .map(|dir| {
            let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
            let rows = read_csv(&dir.join(METRICS_FILE))?;
            Ok((cfg.label(), rows))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(Report::from_runs(&runs))
}
