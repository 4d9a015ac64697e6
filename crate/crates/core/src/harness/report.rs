//! Evaluation results and their aggregation across trials.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ControllerKind, HarnessError};
use crate::microsim::MetricSummary;

/// Six traffic metrics plus cumulative reward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metrics: MetricSummary,
    pub cumulative_reward: f64,
}

impl MetricRow {
    pub const NAMES: [&'static str; 7] =
        ["queue_m", "wait_veh_s", "speed_mps", "stops", "travel_time_s", "wait_ped_s", "cumulative_reward"];

    pub fn values(&self) -> [f64; 7] {
        let m = self.metrics.values();
        [m[0], m[1], m[2], m[3], m[4], m[5], self.cumulative_reward]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        MetricRow {
            metrics: MetricSummary::from_values([v[0], v[1], v[2], v[3], v[4], v[5]]),
            cumulative_reward: v[6],
        }
    }

    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let n = rows.len().max(1) as f64;
        let mut acc = [0.0; 7];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        MetricRow::from_values(acc.map(|a| a / n))
    }

    /// Population standard deviation of every column.
    pub fn std(rows: &[MetricRow]) -> MetricRow {
        let mean = MetricRow::mean(rows).values();
        let n = rows.len().max(1) as f64;
        let mut acc = [0.0; 7];
        for r in rows {
            for ((a, v), m) in acc.iter_mut().zip(r.values()).zip(mean) {
                *a += (v - m).powi(2);
            }
        }
        MetricRow::from_values(acc.map(|a| (a / n).sqrt()))
    }
}

/// One simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub row: MetricRow,
    /// `x -> 1 -> x` hops with phase 1 shorter than the comfort window.
    pub bounce_backs: usize,
    /// Steps where the comfort rules had to yield to the safety mask.
    pub comfort_overrides: usize,
    /// Steps where the safety layer replaced the wish.
    pub projections: usize,
    pub safety_violations: usize,
}

/// One trained agent (or one fixed plan) evaluated over several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub runs: Vec<RunResult>,
}

impl TrialResult {
    pub fn mean(&self) -> MetricRow {
        MetricRow::mean(&self.runs.iter().map(|r| r.row).collect::<Vec<_>>())
    }

    pub fn bounce_backs(&self) -> usize {
        self.runs.iter().map(|r| r.bounce_backs).sum()
    }
}

/// Per-trial means, the mean of the best three trials by cumulative reward,
/// and the standard deviation over all trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub controller: ControllerKind,
    pub trials: Vec<TrialResult>,
    pub trial_means: Vec<MetricRow>,
    pub avg_best_3: MetricRow,
    pub std: MetricRow,
}

/// Indices of the (up to) three rows with the highest cumulative reward.
pub fn best_three(rows: &[MetricRow]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| rows[b].cumulative_reward.total_cmp(&rows[a].cumulative_reward).then(a.cmp(&b)));
    idx.truncate(3);
    idx
}

impl EvalReport {
    pub fn new(controller: ControllerKind, trials: Vec<TrialResult>) -> Self {
        let trial_means: Vec<MetricRow> = trials.iter().map(TrialResult::mean).collect();
        let (avg_best_3, std) = Self::aggregate(&trial_means);
        EvalReport { controller, trials, trial_means, avg_best_3, std }
    }

    pub fn aggregate(trial_means: &[MetricRow]) -> (MetricRow, MetricRow) {
        let best: Vec<MetricRow> = best_three(trial_means).into_iter().map(|i| trial_means[i]).collect();
        (MetricRow::mean(&best), MetricRow::std(trial_means))
    }

    pub fn bounce_backs(&self) -> usize {
        self.trials.iter().map(TrialResult::bounce_backs).sum()
    }

    pub fn safety_violations(&self) -> usize {
        self.trials.iter().flat_map(|t| &t.runs).map(|r| r.safety_violations).sum()
    }

    /// Writes one row per run, per trial mean, plus the best-3 and std rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["row", "trial", "run", "seed"];
        header.extend(MetricRow::NAMES);
        header.push("bounce_backs");
        w.write_record(&header)?;
        let mut record = |kind: &str, trial: String, run: String, seed: String, row: &MetricRow, bounces: String| {
            let mut rec = vec![kind.to_string(), trial, run, seed];
            rec.extend(row.values().iter().map(|v| v.to_string()));
            rec.push(bounces);
            w.write_record(&rec)
        };
        for (t, mean) in self.trials.iter().zip(&self.trial_means) {
            for (i, r) in t.runs.iter().enumerate() {
                record("run", t.trial.to_string(), i.to_string(), r.seed.to_string(), &r.row, r.bounce_backs.to_string())?;
            }
            record("trial", t.trial.to_string(), String::new(), String::new(), mean, t.bounce_backs().to_string())?;
        }
        record("avg_best_3", String::new(), String::new(), String::new(), &self.avg_best_3, String::new())?;
        record("std", String::new(), String::new(), String::new(), &self.std, String::new())?;
        w.flush()?;
        Ok(())
    }

    /// Table-like text rendering.
    pub fn to_table(&self) -> String {
        let mut out = format!("controller ({})\n{:<12}", self.controller, "trial");
        for n in MetricRow::NAMES {
            out += &format!("{n:>18}");
        }
        out.push('\n');
        let mut line = |label: String, row: &MetricRow| {
            out += &format!("{label:<12}");
            for v in row.values() {
                out += &format!("{v:>18.3}");
            }
            out.push('\n');
        };
        for (t, m) in self.trials.iter().zip(&self.trial_means) {
            line(t.trial.to_string(), m);
        }
        line("avg. best 3".into(), &self.avg_best_3);
        line("std".into(), &self.std);
        out
    }
}
