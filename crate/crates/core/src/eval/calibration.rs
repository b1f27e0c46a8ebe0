//! Calibration: loess-smoothed ICI and clipped cross-entropy.

use crate::{Error, Result};

const SPAN: f64 = 0.75;
const CLIP: f64 = 1e-15;

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let t = 1.0 - u * u * u;
        t * t * t
    }
}

/// Local linear regression of `y` on `x` with tricube weights over the
/// nearest `ceil(span·n)` points, evaluated at every `x_i`.
pub fn loess_fit(x: &[f64], y: &[f64], span: f64) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let q = ((span * n as f64).ceil() as usize).clamp(1, n);

    let mut fitted = vec![0.0; n];
    let mut lo = 0usize;
    for (i, &xi) in xs.iter().enumerate() {
        while lo + q < n && xs[lo + q] - xi < xi - xs[lo] {
            lo += 1;
        }
        let hi = lo + q;
        let dmax = (xi - xs[lo]).max(xs[hi - 1] - xi);
        let (mut sw, mut swx, mut swy) = (0.0, 0.0, 0.0);
        let mut w = Vec::with_capacity(q);
        for j in lo..hi {
            let wj = if dmax > 0.0 { tricube((xs[j] - xi).abs() / dmax) } else { 1.0 };
            w.push(wj);
            sw += wj;
            swx += wj * xs[j];
            swy += wj * ys[j];
        }
        let (mx, my) = (swx / sw, swy / sw);
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (k, j) in (lo..hi).enumerate() {
            let dx = xs[j] - mx;
            sxx += w[k] * dx * dx;
            sxy += w[k] * dx * (ys[j] - my);
        }
        fitted[order[i]] = if sxx > 1e-14 * sw { my + sxy / sxx * (xi - mx) } else { my };
    }
    fitted
}

/// Integrated calibration index: mean absolute gap between the smoothed
/// calibration curve and the predicted probability.
pub fn ici(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: probs.len() });
    }
    if probs.len() < 10 {
        return Err(Error::invalid("ICI needs at least 10 instances"));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let smooth = loess_fit(probs, &y, SPAN);
    Ok(smooth.iter().zip(probs).map(|(s, p)| (s - p).abs()).sum::<f64>() / probs.len() as f64)
}

/// Mean log loss with probabilities clipped to [1e-15, 1 - 1e-15].
pub fn cross_entropy(probs: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CLIP, 1.0 - CLIP);
            if y { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    total / probs.len() as f64
}
