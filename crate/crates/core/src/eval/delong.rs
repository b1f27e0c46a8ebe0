//! DeLong structural components, computed in O(n log n) from midranks.

use serde::{Deserialize, Serialize};

use super::{midranks, CiMethod, MetricCI, ScoredSet};
use crate::{stats, Error, Result};

/// Placement values: for each positive, the fraction of negatives it beats
/// (ties count half); for each negative, the fraction of positives it loses
/// to.
pub fn placements(scored: &ScoredSet) -> Result<(Vec<f64>, Vec<f64>)> {
    if !scored.has_both_classes() {
        return Err(Error::SingleClass);
    }
    let pos: Vec<f64> = scored.scores.iter().zip(&scored.labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scored.scores.iter().zip(&scored.labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    let (m, n) = (pos.len(), neg.len());
    let mut all = pos.clone();
    all.extend_from_slice(&neg);
    let tz = midranks(&all);
    let tx = midranks(&pos);
    let ty = midranks(&neg);
    let v10 = (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect();
    let v01 = (0..n).map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64).collect();
    Ok((v10, v01))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelongVariance {
    pub auc: f64,
    pub variance: f64,
    /// Set when the variance is exactly zero (e.g. perfect separation).
    pub degenerate: bool,
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let ma = stats::mean(a);
    let mb = stats::mean(b);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn require_two_per_class(scored: &ScoredSet) -> Result<()> {
    let pos = scored.n_positive();
    if pos == 0 || pos == scored.len() {
        return Err(Error::SingleClass);
    }
    if pos < 2 || scored.len() - pos < 2 {
        return Err(Error::invalid("DeLong variance needs at least two instances per class"));
    }
    Ok(())
}

/// Variance of the AUROC estimator.
pub fn delong_variance(scored: &ScoredSet) -> Result<DelongVariance> {
    require_two_per_class(scored)?;
    let (v10, v01) = placements(scored)?;
    let auc = stats::mean(&v10);
    let variance = cov(&v10, &v10) / v10.len() as f64 + cov(&v01, &v01) / v01.len() as f64;
    Ok(DelongVariance { auc, variance, degenerate: variance == 0.0 })
}

/// `point ± z·se`, clipped to [0, 1].
pub fn wald_ci(point: f64, variance: f64, level: f64) -> MetricCI {
    let z = stats::normal_quantile(0.5 + level / 2.0);
    let half = z * variance.max(0.0).sqrt();
    MetricCI {
        point,
        lower: (point - half).max(0.0),
        upper: (point + half).min(1.0),
        level,
        method: CiMethod::Wald,
    }
}

/// Logit-transformed DeLong interval; falls back to a clipped Wald interval
/// (method `Wald`) when the AUROC is 0 or 1.
pub fn delong_ci_logistic(scored: &ScoredSet, level: f64) -> Result<MetricCI> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must be in (0, 1), got {level}")));
    }
    let dv = delong_variance(scored)?;
    let a = dv.auc;
    if a <= 0.0 || a >= 1.0 {
        return Ok(wald_ci(a, dv.variance, level));
    }
    let z = stats::normal_quantile(0.5 + level / 2.0);
    let se_logit = dv.variance.sqrt() / (a * (1.0 - a));
    let l = stats::logit(a);
    Ok(MetricCI {
        point: a,
        lower: stats::sigmoid(l - z * se_logit),
        upper: stats::sigmoid(l + z * se_logit),
        level,
        method: CiMethod::DelongLogistic,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
    /// Set when the variance of the difference is zero.
    pub degenerate: bool,
}

/// Two-sided DeLong test for two correlated AUROCs on the same instances.
pub fn delong_paired_test(a: &ScoredSet, b: &ScoredSet) -> Result<PairedTest> {
    if a.labels != b.labels {
        return Err(Error::invalid("paired DeLong test needs identical labels"));
    }
    require_two_per_class(a)?;
    let (a10, a01) = placements(a)?;
    let (b10, b01) = placements(b)?;
    let (m, n) = (a10.len() as f64, a01.len() as f64);
    let auc_a = stats::mean(&a10);
    let auc_b = stats::mean(&b10);
    let s_aa = cov(&a10, &a10) / m + cov(&a01, &a01) / n;
    let s_bb = cov(&b10, &b10) / m + cov(&b01, &b01) / n;
    let s_ab = cov(&a10, &b10) / m + cov(&a01, &b01) / n;
    let var = s_aa + s_bb - 2.0 * s_ab;
    let diff = auc_a - auc_b;
    if var <= f64::EPSILON * (s_aa + s_bb) || var <= 0.0 {
        let p_value = if diff == 0.0 { 1.0 } else { 0.0 };
        return Ok(PairedTest { auc_a, auc_b, z: 0.0, p_value, degenerate: true });
    }
    let z = diff / var.sqrt();
    Ok(PairedTest { auc_a, auc_b, z, p_value: stats::two_sided_p(z), degenerate: false })
}
