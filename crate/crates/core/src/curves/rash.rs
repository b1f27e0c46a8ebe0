//! Adaptive random average shifted histograms for code-event intensity.
//!
//! Each event gets its own bin width: the distance to its m-th nearest
//! neighbouring event, clamped to `[min_bandwidth_days, max_bandwidth_days]`
//! and to the record length. `R` histograms share one uniformly random bin
//! origin each (expressed as a fraction of the event's width); every event
//! spreads unit mass uniformly over the bin that contains it, and mass that
//! falls outside the record is reflected back at the boundary, so the
//! estimate integrates to the event count exactly. Averaging the `R`
//! histograms and converting from events/day to events/year gives the curve,
//! to which the intensity floor is added.

use rand::Rng;

use super::{Curve, CurveParams};
use crate::ehr::Span;
use crate::{seed, Error, Result};

/// Bin width in whole days for each event (events sorted, relative days).
fn bandwidths(t: &[i64], params: &CurveParams, n_days: usize) -> Vec<usize> {
    let cap = (n_days as f64).max(1.0);
    let lo = params.min_bandwidth_days.min(cap);
    let hi = params.max_bandwidth_days.min(cap);
    t.iter()
        .enumerate()
        .map(|(i, &ti)| {
            let raw = if t.len() == 1 {
                params.max_bandwidth_days
            } else {
                let m = params.neighbor_rank.min(t.len() - 1).max(1);
                let from = i.saturating_sub(m);
                let to = (i + m).min(t.len() - 1);
                let mut d: Vec<i64> =
                    (from..=to).filter(|&j| j != i).map(|j| (t[j] - ti).abs()).collect();
                d.sort_unstable();
                d[m - 1] as f64
            };
            raw.clamp(lo, hi).round().max(1.0) as usize
        })
        .collect()
}

/// Add `w` to every day in `[lo, hi)`, reflecting out-of-range parts at the
/// record boundaries. Requires `hi - lo <= n`.
fn deposit(diff: &mut [f64], lo: i64, hi: i64, w: f64) {
    let n = (diff.len() - 1) as i64;
    if lo >= hi {
        return;
    }
    if lo < 0 {
        let a = hi.min(0);
        deposit(diff, -a, -lo, w);
    }
    if hi > n {
        let b = lo.max(n);
        deposit(diff, 2 * n - hi, 2 * n - b, w);
    }
    let (l, h) = (lo.max(0), hi.min(n));
    if l < h {
        diff[l as usize] += w;
        diff[h as usize] -= w;
    }
}

/// Smooth code intensity in events/year at daily resolution.
///
/// Returns [`Error::NoEvents`] for an empty event list; callers then use
/// [`super::impute_code_baseline`].
pub fn code_intensity_curve(
    event_days: &[i64],
    span: Span,
    params: &CurveParams,
    seed: u64,
) -> Result<Curve> {
    if event_days.is_empty() {
        return Err(Error::NoEvents);
    }
    if let Some(d) = event_days.iter().find(|d| !span.contains(**d)) {
        return Err(Error::invalid(format!("event day {d} outside record span")));
    }
    let n = span.len();
    let mut t: Vec<i64> = event_days.iter().map(|d| d - span.first_day).collect();
    t.sort_unstable();
    let widths = bandwidths(&t, params, n);

    let r_count = params.histograms.max(1);
    let mut rng = seed::rng(seed);
    let offsets: Vec<f64> = (0..r_count).map(|_| rng.random::<f64>()).collect();

    let mut diff = vec![0.0; n + 1];
    for (&ti, &width) in t.iter().zip(&widths) {
        let len = width as f64;
        let w = 1.0 / (r_count as f64 * len);
        let center = ti as f64 + 0.5;
        for &u in &offsets {
            let origin = u * len;
            let start = origin + ((center - origin) / len).floor() * len;
            let lo = (start - 0.5).ceil() as i64;
            deposit(&mut diff, lo, lo + width as i64, w);
        }
    }

    let mut values = Vec::with_capacity(n);
    let mut acc = 0.0;
    for d in diff.iter().take(n) {
        acc += d;
        values.push(acc.max(0.0) * 365.25 + params.intensity_floor);
    }
    Ok(Curve { start_day: span.first_day, values })
}
