use std::path::Path;

use serde::Serialize;

use super::run::{run_estimator, simulate_truth};
use super::{write_atomic, ExperimentConfig, HarnessError, NoiseRegime};
use crate::model::fmt_f64;

/// Per-step wall times of one estimator in one regime.
#[derive(Clone, Debug, Serialize)]
pub struct TimingRow {
    pub regime: String,
    pub estimator: String,
    pub repeats: usize,
    /// Maximum over steps of the mean over repeats.
    pub t_max_ms: f64,
    /// Mean over steps and repeats.
    pub t_mean_ms: f64,
    /// Per-step means over repeats.
    #[serde(skip)]
    pub per_step_ms: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn get(&self, regime: NoiseRegime, estimator: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.regime == regime.name() && r.estimator == estimator)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,estimator,repeats,t_max_ms,t_mean_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.regime,
                r.estimator,
                r.repeats,
                fmt_f64(r.t_max_ms),
                fmt_f64(r.t_mean_ms)
            ));
        }
        out
    }

    /// Regimes as rows, estimators as columns, `t̄_max` in ms.
    pub fn to_markdown(&self) -> String {
        let mut regimes: Vec<&str> = vec![];
        let mut names: Vec<&str> = vec![];
        for r in &self.rows {
            if !regimes.contains(&r.regime.as_str()) {
                regimes.push(&r.regime);
            }
            if !names.contains(&r.estimator.as_str()) {
                names.push(&r.estimator);
            }
        }
        let mut out = format!("| t_max [ms] | {} |\n|---|{}\n", names.join(" | "), "---|".repeat(names.len()));
        for g in regimes {
            let cells: Vec<String> = names
                .iter()
                .map(|n| {
                    self.rows
                        .iter()
                        .find(|r| r.regime == g && r.estimator == *n)
                        .map_or("-".into(), |r| format!("{:.2}", r.t_max_ms))
                })
                .collect();
            out.push_str(&format!("| {g} | {} |\n", cells.join(" | ")));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        write_atomic(&dir.join("timing.csv"), self.to_csv().as_bytes())?;
        write_atomic(&dir.join("timing.md"), self.to_markdown().as_bytes())
    }
}

/// Times every estimator in `regimes` sequentially, `repeats` times each.
/// Repeats are interleaved across estimators so slow drift of the machine
/// affects all of them alike.
pub fn bench_timing(cfg: &ExperimentConfig, regimes: &[NoiseRegime], repeats: usize) -> Result<TimingTable, HarnessError> {
    if repeats == 0 {
        return Err(HarnessError::Config("repeats must be at least 1".into()));
    }
    let mut rows = vec![];
    for &regime in regimes {
        let truth = simulate_truth(cfg, regime, cfg.seed)?;
        let mut sums = vec![vec![0.0; truth.outputs.len()]; cfg.estimators.len()];
        for _ in 0..repeats {
            for (i, est) in cfg.estimators.iter().enumerate() {
                let run = run_estimator(cfg, est, &truth)?;
                for (s, e) in sums[i].iter_mut().zip(&run.estimates) {
                    *s += e.wall_time * 1e3;
                }
            }
        }
        for (est, sum) in cfg.estimators.iter().zip(sums) {
            let per_step: Vec<f64> = sum.iter().map(|s| s / repeats as f64).collect();
            rows.push(TimingRow {
                regime: regime.name().into(),
                estimator: est.name.clone(),
                repeats,
                t_max_ms: per_step.iter().copied().fold(0.0, f64::max),
                t_mean_ms: per_step.iter().sum::<f64>() / per_step.len() as f64,
                per_step_ms: per_step,
            });
        }
    }
    Ok(TimingTable { rows })
}
