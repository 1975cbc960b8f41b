//! Accuracy, detection delay and ensemble summaries.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub rmse: f64,
    pub mae: f64,
    pub valid_indices: Vec<usize>,
    pub n_valid: usize,
}

fn errors_over(pairs: impl Iterator<Item = (usize, Option<f64>, Option<f64>)>) -> Result<AccuracyReport> {
    let mut idx = Vec::new();
    let (mut sq, mut abs) = (0.0, 0.0);
    for (i, a, b) in pairs {
        if let (Some(a), Some(b)) = (a, b) {
            if a.is_finite() && b.is_finite() {
                let e = a - b;
                sq += e * e;
                abs += e.abs();
                idx.push(i);
            }
        }
    }
    if idx.is_empty() {
        return Err(Error::InvalidInput("no index where both series are defined".into()));
    }
    let n = idx.len() as f64;
    Ok(AccuracyReport {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        n_valid: idx.len(),
        valid_indices: idx,
    })
}

/// RMSE and MAE over positions `t >= valid_from` where both are defined.
pub fn accuracy(est: &[Option<f64>], truth: &[Option<f64>], valid_from: usize) -> Result<AccuracyReport> {
    let n = est.len().min(truth.len());
    errors_over((valid_from..n).map(|t| (t, est[t], truth[t])))
}

/// Errors of `est` against a fully observed `target` over `range`.
pub fn incidence_errors(est: &[Option<f64>], target: &[f64], range: Range<usize>) -> Result<AccuracyReport> {
    let end = range.end.min(est.len()).min(target.len());
    errors_over((range.start..end).map(|t| (t, est[t], Some(target[t]))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Downward,
    Upward,
}

impl Direction {
    pub fn from_levels(before: f64, after: f64) -> Self {
        if after < before {
            Direction::Downward
        } else {
            Direction::Upward
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub true_cp: usize,
    pub detected_cp: Option<usize>,
    pub delay: Option<i64>,
    pub missed: bool,
}

/// First strict threshold crossing inside `scope`.
///
/// A downward crossing at `i` means `est[i-1] >= 1` and `est[i] < 1`; upward
/// is symmetric with `<= 1` and `> 1`. Both positions must lie in `scope`;
/// positions without an estimate break the chain.
pub fn detection(est: &[Option<f64>], t_cp: usize, direction: Direction, scope: Range<usize>) -> DetectionReport {
    let end = scope.end.min(est.len());
    let start = scope.start + 1;
    let hit = (start..end).find(|&i| match (est[i - 1], est[i]) {
        (Some(prev), Some(cur)) => match direction {
            Direction::Downward => prev >= 1.0 && cur < 1.0,
            Direction::Upward => prev <= 1.0 && cur > 1.0,
        },
        _ => false,
    });
    DetectionReport {
        true_cp: t_cp,
        detected_cp: hit,
        delay: hit.map(|h| h as i64 - t_cp as i64),
        missed: hit.is_none(),
    }
}

/// One report per change point; each search runs from the previous change
/// point (or the series start) up to the next one (or the series end), widened
/// by `grace` days on the right.
pub fn detect_changes(est: &[Option<f64>], changes: &[(usize, Direction)], grace: usize) -> Vec<DetectionReport> {
    changes
        .iter()
        .enumerate()
        .map(|(k, &(cp, dir))| {
            let lo = if k == 0 { 0 } else { changes[k - 1].0 };
            let hi = changes.get(k + 1).map_or(est.len(), |c| c.0).saturating_add(grace);
            detection(est, cp, dir, lo..hi)
        })
        .collect()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub mdr: f64,
    pub n_replicas: usize,
}

/// Median and quartiles over present values; `mdr` is the fraction flagged missed.
pub fn summarize(values: &[Option<f64>], missed: &[bool]) -> EnsembleSummary {
    let mut present: Vec<f64> = values.iter().flatten().copied().filter(|v| !v.is_nan()).collect();
    present.sort_by(f64::total_cmp);
    let n = values.len().max(missed.len());
    let mdr = if n == 0 {
        0.0
    } else {
        missed.iter().filter(|&&m| m).count() as f64 / n as f64
    };
    let q = |p| (!present.is_empty()).then(|| quantile_sorted(&present, p));
    EnsembleSummary {
        median: q(0.5),
        q1: q(0.25),
        q3: q(0.75),
        mdr,
        n_replicas: n,
    }
}
