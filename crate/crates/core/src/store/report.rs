//! Run results and the CSV reports built from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{AggregateReport, Statistic, WinRateReport};

/// Summary written as `result.json` in every alignment run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub task: String,
    pub seed: u64,
    pub method: String,
    #[serde(rename = "F")]
    pub freq: usize,
    pub win_rate: f64,
    pub steps: usize,
    pub ensemble: usize,
    pub ema_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
/// One line of a results CSV.
pub struct ResultRow {
    pub run_id: String,
    pub task: String,
    pub seed: u64,
    pub method: String,
    #[serde(rename = "F")]
    pub freq: usize,
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    #[serde(rename = "F")]
    pub freq: usize,
    pub statistic: Statistic,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_runs: usize,
}

impl AggregateRow {
    /// One row per statistic.
    pub fn from_report(method: &str, freq: usize, rep: &AggregateReport) -> Vec<Self> {
        let n_runs = rep.n_runs.values().sum();
        Statistic::ALL
            .iter()
            .map(|&s| {
                let e = rep.get(s);
                Self {
                    method: method.to_string(),
                    freq,
                    statistic: s,
                    estimate: e.estimate,
                    ci_low: e.ci_low,
                    ci_high: e.ci_high,
                    n_runs,
                }
            })
            .collect()
    }
}

/// One row of a per-prompt evaluation CSV. The closing summary row has
/// `prompt = "all"`, no rewards, and the win rate as its credit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub prompt: String,
    pub r_candidate: Option<f64>,
    pub r_opponent: Option<f64>,
    pub outcome: String,
    pub credit: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    super::write_atomic(path, &bytes)
}

pub fn write_results_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    write_rows(
        path,
        results.iter().map(|r| ResultRow {
            run_id: r.run_id.clone(),
            task: r.task.clone(),
            seed: r.seed,
            method: r.method.clone(),
            freq: r.freq,
            win_rate: r.win_rate,
        }),
    )
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<ResultRow>()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_eval_csv(path: &Path, report: &WinRateReport) -> Result<()> {
    let per_prompt = report.details.iter().map(|d| EvalRow {
        prompt: d.prompt_id.to_string(),
        r_candidate: Some(d.r_candidate),
        r_opponent: Some(d.r_opponent),
        outcome: format!("{:?}", d.outcome).to_lowercase(),
        credit: d.outcome.credit(),
    });
    let summary = EvalRow {
        prompt: "all".into(),
        r_candidate: None,
        r_opponent: None,
        outcome: "win_rate".into(),
        credit: report.win_rate,
    };
    write_rows(path, per_prompt.chain(std::iter::once(summary)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_csv_has_summary_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let rep = WinRateReport::from_rewards([(1.0, 2.0), (3.0, 2.0), (1.5, 1.5)]);
        write_eval_csv(&path, &rep).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "prompt,r_candidate,r_opponent,outcome,credit");
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert_eq!(lines[3], "2,1.5,1.5,tie,0.5");
        assert_eq!(lines[4], "all,,,win_rate,0.5");
    }

    #[test]
    fn results_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![RunResult {
            run_id: "F2-s1".into(),
            task: "t".into(),
            seed: 1,
            method: "behavior-dpo".into(),
            freq: 2,
            win_rate: 0.625,
            steps: 10,
            ensemble: 5,
            ema_tau: 1e-3,
        }];
        write_results_csv(&path, &rows).unwrap();
        assert!(std::fs::read_to_string(&path)
            .unwrap()
            .starts_with("run_id,task,seed,method,F,win_rate\n"));
        let back = read_results_csv(&path).unwrap();
        let row = ResultRow {
            run_id: "F2-s1".into(),
            task: "t".into(),
            seed: 1,
            method: "behavior-dpo".into(),
            freq: 2,
            win_rate: 0.625,
        };
        assert_eq!(back, vec![row]);
    }
}
