//! Discrimination and calibration statistics.

mod bootstrap;
mod calibration;
mod delong;

use serde::{Deserialize, Serialize};

pub use bootstrap::{bootstrap_pivot_ci, BootstrapOptions};
pub use calibration::{cross_entropy, ici, loess_fit};
pub use delong::{
    delong_ci_logistic, delong_paired_test, delong_variance, placements, wald_ci, DelongVariance, PairedTest,
};

use crate::{Error, Result};

/// Scores paired with binary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: labels.len(), got: scores.len() });
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.n_positive();
        pos > 0 && pos < self.len()
    }

    /// Subset by instance indices (indices may repeat).
    pub fn select(&self, idx: &[usize]) -> ScoredSet {
        ScoredSet {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    DelongLogistic,
    Wald,
    BootstrapPivot,
}

/// A point estimate with a two-sided interval. Pivot intervals are clipped
/// to the metric's domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: CiMethod,
}

/// Midranks (1-based, ties share the average rank).
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Tie-aware Mann–Whitney AUROC.
pub fn auroc(scored: &ScoredSet) -> Result<f64> {
    if !scored.has_both_classes() {
        return Err(Error::SingleClass);
    }
    let ranks = midranks(&scored.scores);
    let m = scored.n_positive() as f64;
    let n = (scored.len() as f64) - m;
    let rank_sum: f64 = ranks.iter().zip(&scored.labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub threshold: f64,
    pub recall: f64,
    pub specificity: f64,
    /// `None` when nothing is predicted positive.
    pub precision: Option<f64>,
}

/// Confusion-matrix ratios with `score >= threshold` predicted positive.
pub fn point_metrics(scored: &ScoredSet, threshold: f64) -> PointMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (s, l) in scored.scores.iter().zip(&scored.labels) {
        match (*s >= threshold, *l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { f64::NAN } else { a as f64 / (a + b) as f64 };
    PointMetrics {
        threshold,
        recall: ratio(tp, fn_),
        specificity: ratio(tn, fp),
        precision: if tp + fp == 0 { None } else { Some(tp as f64 / (tp + fp) as f64) },
    }
}
