//! Basic (pivot) bootstrap intervals.

use rand::Rng;
use rayon::prelude::*;

use super::{CiMethod, MetricCI, ScoredSet};
use crate::{seed, stats, Error, Result};

#[derive(Clone, Debug)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    /// Interval bounds are clipped to this range.
    pub domain: (f64, f64),
    /// Redraw resamples that contain a single class.
    pub needs_both_classes: bool,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions { replicates: 1000, level: 0.95, seed: 0, domain: (0.0, 1.0), needs_both_classes: true }
    }
}

/// Pivot interval `[2θ − q_hi, 2θ − q_lo]` from resampled statistics.
pub fn bootstrap_pivot_ci<F>(metric: F, scored: &ScoredSet, opts: &BootstrapOptions) -> Result<MetricCI>
where
    F: Fn(&ScoredSet) -> Result<f64> + Sync,
{
    if opts.replicates < 100 {
        return Err(Error::invalid(format!("bootstrap needs at least 100 replicates, got {}", opts.replicates)));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::invalid(format!("confidence level must be in (0, 1), got {}", opts.level)));
    }
    if scored.is_empty() {
        return Err(Error::invalid("bootstrap of an empty set"));
    }
    if opts.needs_both_classes && !scored.has_both_classes() {
        return Err(Error::SingleClass);
    }
    let point = metric(scored)?;
    let n = scored.len();
    let cap = 10 * opts.replicates;

    let draws: Vec<Result<(f64, usize)>> = (0..opts.replicates)
        .into_par_iter()
        .map(|r| {
            let rep_seed = seed::derive_index(opts.seed, r as u64);
            for attempt in 0..cap {
                let mut rng = seed::rng(seed::derive_index(rep_seed, attempt as u64));
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let sample = scored.select(&idx);
                if opts.needs_both_classes && !sample.has_both_classes() {
                    continue;
                }
                return metric(&sample).map(|v| (v, attempt));
            }
            Err(Error::Numerical(format!("bootstrap redraw cap of {cap} exceeded")))
        })
        .collect();

    let mut values = Vec::with_capacity(opts.replicates);
    let mut redraws = 0usize;
    for d in draws {
        let (v, extra) = d?;
        redraws += extra;
        values.push(v);
    }
    if redraws > cap {
        return Err(Error::Numerical(format!("bootstrap redraw cap of {cap} exceeded")));
    }
    values.sort_by(f64::total_cmp);
    let alpha = 1.0 - opts.level;
    let q_lo = stats::quantile_sorted(&values, alpha / 2.0);
    let q_hi = stats::quantile_sorted(&values, 1.0 - alpha / 2.0);
    let (lo_dom, hi_dom) = opts.domain;
    Ok(MetricCI {
        point,
        lower: (2.0 * point - q_hi).clamp(lo_dom, hi_dom),
        upper: (2.0 * point - q_lo).clamp(lo_dom, hi_dom),
        level: opts.level,
        method: CiMethod::BootstrapPivot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::auroc;

    #[test]
    fn constant_metric_gives_zero_width() {
        let s = ScoredSet::new(vec![0.2, 0.8, 0.4, 0.6], vec![false, true, false, true]).unwrap();
        let opts = BootstrapOptions { replicates: 200, ..Default::default() };
        let ci = bootstrap_pivot_ci(|_| Ok(0.25), &s, &opts).unwrap();
        assert_eq!((ci.lower, ci.point, ci.upper), (0.25, 0.25, 0.25));
    }

    #[test]
    fn seeded_and_ordered() {
        let scores: Vec<f64> = (0..60).map(|i| ((i * 37) % 60) as f64 / 60.0).collect();
        let labels: Vec<bool> = (0..60).map(|i| (i * 37) % 60 > 25 || i % 7 == 0).collect();
        let s = ScoredSet::new(scores, labels).unwrap();
        let opts = BootstrapOptions { replicates: 300, seed: 5, ..Default::default() };
        let a = bootstrap_pivot_ci(auroc, &s, &opts).unwrap();
        let b = bootstrap_pivot_ci(auroc, &s, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.lower <= a.upper && a.upper <= 1.0);
    }

    #[test]
    fn rejects_small_b() {
        let s = ScoredSet::new(vec![0.1, 0.9], vec![false, true]).unwrap();
        let opts = BootstrapOptions { replicates: 50, ..Default::default() };
        assert!(bootstrap_pivot_ci(auroc, &s, &opts).is_err());
    }
}
