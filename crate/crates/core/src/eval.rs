//! Inference-time threshold sweeps, the skim-vs-skip comparison, and run
//! summaries.

use crate::cell::Policy;
use crate::error::{contract, Result};
use crate::models::{Evaluation, TaskModel};
use crate::training::HaltReason;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Thresholds within this distance above 1 are clamped to 1.
pub const THRESHOLD_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub metric: f64,
    pub skim_rate: f64,
    pub flop_r: f64,
}

/// `0, 0.1, …, 1.0`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Checks and clamps a threshold list, rejecting anything outside `[0, 1]`.
pub fn normalize_thresholds(thresholds: &[f64]) -> Result<Vec<f64>> {
    if thresholds.is_empty() {
        return Err(contract("no thresholds given"));
    }
    thresholds
        .iter()
        .map(|&t| {
            if t > 1.0 && t <= 1.0 + THRESHOLD_SLACK {
                Ok(1.0)
            } else if (0.0..=1.0).contains(&t) {
                Ok(t)
            } else {
                Err(contract(format!("threshold {t} outside [0, 1]")))
            }
        })
        .collect()
}

/// Hard inference with `Threshold(θ)` for each θ. Every θ uses the same
/// evaluation seed.
pub fn sweep_thresholds<M: TaskModel>(model: &M, data: &[M::Example], thresholds: &[f64], seed: u64) -> Result<Vec<SweepRow>> {
    normalize_thresholds(thresholds)?
        .into_iter()
        .map(|threshold| {
            let e = model.evaluate(data, Policy::Threshold(threshold), seed)?;
            Ok(SweepRow {
                threshold,
                metric: e.metric,
                skim_rate: e.skim_rate,
                flop_r: e.flop_r,
            })
        })
        .collect()
}

/// CSV with header `mode,threshold,metric,skim_rate,flop_r`.
pub fn write_sweep_csv(path: &Path, sections: &[(&str, &[SweepRow])]) -> Result<()> {
    let mut out = String::from("mode,threshold,metric,skim_rate,flop_r\n");
    for (mode, rows) in sections {
        for r in *rows {
            out.push_str(&format!(
                "{mode},{},{:.17e},{:.17e},{:.17e}\n",
                r.threshold, r.metric, r.skim_rate, r.flop_r
            ));
        }
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Metric of a sweep linearly interpolated at a given Flop-R, or `None`
/// when `flop_r` falls outside the sweep's Flop-R range.
pub fn metric_at_flop_r(rows: &[SweepRow], flop_r: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.flop_r, r.metric)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (lo, hi) = (pts.first()?.0, pts.last()?.0);
    if flop_r < lo || flop_r > hi {
        return None;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if flop_r >= x0 && flop_r <= x1 {
            if x1 == x0 {
                return Some(y0.max(y1));
            }
            return Some(y0 + (y1 - y0) * (flop_r - x0) / (x1 - x0));
        }
    }
    // single point
    Some(pts[0].1)
}

/// Mean metric of both curves over the skim curve's points whose Flop-R
/// the other curve also covers, as `(skim_mean, other_mean, n_points)`.
pub fn compare_at_matched_flop_r(skim: &[SweepRow], other: &[SweepRow]) -> Option<(f64, f64, usize)> {
    let pairs: Vec<(f64, f64)> = skim
        .iter()
        .filter_map(|r| metric_at_flop_r(other, r.flop_r).map(|m| (r.metric, m)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    Some((
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
        pairs.len(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionRate {
    pub direction: String,
    pub skim_rate: f64,
}

/// Final report of a training run, written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// `"classifier"` or `"qa"`.
    pub task: String,
    /// `"skim"` or `"lstm"`.
    pub cell: String,
    /// `"accuracy"` or `"exact_match"`.
    pub metric_name: String,
    pub metric: f64,
    pub f1: Option<f64>,
    pub skim_rate: f64,
    pub flop_r: f64,
    /// Skim rate of each recurrent direction, layer by layer.
    pub layer_skim_rates: Vec<DirectionRate>,
    pub eval_policy: String,
    pub best_step: u64,
    pub steps_run: u64,
    pub halt: HaltReason,
}

impl TrainSummary {
    pub fn new(
        task: &str,
        cell: &str,
        eval_policy: Policy,
        eval: &Evaluation,
        best_step: u64,
        steps_run: u64,
        halt: HaltReason,
    ) -> Self {
        Self {
            task: task.to_string(),
            cell: cell.to_string(),
            metric_name: if task == "qa" { "exact_match" } else { "accuracy" }.to_string(),
            metric: eval.metric,
            f1: eval.f1,
            skim_rate: eval.skim_rate,
            flop_r: eval.flop_r,
            layer_skim_rates: eval
                .per_direction
                .iter()
                .map(|(d, r)| DirectionRate {
                    direction: d.clone(),
                    skim_rate: *r,
                })
                .collect(),
            eval_policy: policy_name(eval_policy),
            best_step,
            steps_run,
            halt,
        }
    }
}

pub fn policy_name(p: Policy) -> String {
    match p {
        Policy::Sample => "sample".into(),
        Policy::Argmax => "argmax".into(),
        Policy::Threshold(t) => format!("threshold:{t}"),
        Policy::Forced(d) => format!("forced:{}", if d == crate::cell::Decision::Read { "read" } else { "skim" }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(flop_r: f64, metric: f64) -> SweepRow {
        SweepRow {
            threshold: 0.0,
            metric,
            skim_rate: 0.0,
            flop_r,
        }
    }

    #[test]
    fn thresholds_are_clamped_or_rejected() {
        assert_eq!(normalize_thresholds(&[0.0, 1.0 + 1e-9]).unwrap(), vec![0.0, 1.0]);
        assert!(normalize_thresholds(&[1.1]).is_err());
        assert!(normalize_thresholds(&[-0.1]).is_err());
        assert!(normalize_thresholds(&[]).is_err());
        assert_eq!(default_thresholds().len(), 11);
    }

    #[test]
    fn interpolation_examples() {
        let rows = [row(1.0, 0.9), row(3.0, 0.5)];
        assert_eq!(metric_at_flop_r(&rows, 2.0), Some(0.7));
        assert_eq!(metric_at_flop_r(&rows, 3.0), Some(0.5));
        assert_eq!(metric_at_flop_r(&rows, 3.5), None);
        let (a, b, n) = compare_at_matched_flop_r(&[row(2.0, 0.8), row(9.0, 0.1)], &rows).unwrap();
        assert_eq!((a, n), (0.8, 1));
        assert!((b - 0.7).abs() < 1e-15);
    }
}
