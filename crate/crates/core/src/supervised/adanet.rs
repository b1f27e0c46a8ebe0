//! Sure independence screening and the adaptive elastic net.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::enet::{fit_enet_weighted, EnetOptions};
use super::{check_training_data, default_ids, LogisticModel, ModelProvenance, Representation};
use crate::Result;

/// `⌊n / ln n⌋`, at least 1.
pub fn default_screen_size(n: usize) -> usize {
    if n < 3 {
        return 1;
    }
    ((n as f64 / (n as f64).ln()).floor() as usize).max(1)
}

/// Indices of the `min(d, p)` features with the largest absolute
/// correlation with `y`, best first. Constant features score zero; ties keep
/// column order.
pub fn sis_screen(x: &DMatrix<f64>, y: &[bool], d: usize) -> Vec<usize> {
    let n = x.nrows() as f64;
    let ybar = y.iter().filter(|v| **v).count() as f64 / n;
    let yc: Vec<f64> = y.iter().map(|&v| if v { 1.0 - ybar } else { -ybar }).collect();
    let scores: Vec<f64> = (0..x.ncols())
        .map(|j| {
            let col = x.column(j);
            let m = col.mean();
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (v, yv) in col.iter().zip(&yc) {
                sxy += (v - m) * yv;
                sxx += (v - m) * (v - m);
            }
            let syy: f64 = yc.iter().map(|v| v * v).sum();
            if sxx <= 0.0 || syy <= 0.0 {
                0.0
            } else {
                (sxy / (sxx * syy).sqrt()).abs()
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(d.max(1).min(x.ncols()));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdanetParams {
    /// Defaults to `⌊n / ln n⌋`.
    pub screen_size: Option<usize>,
    pub gamma: f64,
    pub pilot_lambda1: f64,
    pub pilot_lambda2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for AdanetParams {
    fn default() -> Self {
        AdanetParams { screen_size: None, gamma: 1.0, pilot_lambda1: 0.01, pilot_lambda2: 0.01, lambda1: 0.01, lambda2: 0.01 }
    }
}

/// `(|β_j| + 1/n)^(−γ)`, or all ones when every pilot weight is zero.
pub fn adaptive_weights(pilot: &[f64], n: usize, gamma: f64) -> Vec<f64> {
    if pilot.iter().all(|b| *b == 0.0) {
        log::debug!("pilot fit selected nothing; using uniform adaptive weights");
        return vec![1.0; pilot.len()];
    }
    let stab = 1.0 / n as f64;
    pilot.iter().map(|b| (b.abs() + stab).powf(-gamma)).collect()
}

/// Screening, pilot elastic net, then a weighted-L1 refit on the screened
/// columns. Unscreened features get weight zero.
pub fn fit_adanet(x: &DMatrix<f64>, y: &[bool], params: &AdanetParams) -> Result<LogisticModel> {
    check_training_data(x, y)?;
    let n = x.nrows();
    let d = params.screen_size.unwrap_or_else(|| default_screen_size(n));
    let mut screened = sis_screen(x, y, d);
    screened.sort_unstable();
    let xs = x.select_columns(&screened);
    let opts = EnetOptions::default();
    let ones = vec![1.0; screened.len()];
    let pilot = fit_enet_weighted(&xs, y, params.pilot_lambda1, params.pilot_lambda2, &ones, None, &opts)?;
    let penalty = adaptive_weights(&pilot.weights, n, params.gamma);
    let refit = fit_enet_weighted(&xs, y, params.lambda1, params.lambda2, &penalty, None, &opts)?;
    if !refit.converged {
        log::warn!("adaptive refit hit the iteration cap (λ1={}, λ2={})", params.lambda1, params.lambda2);
    }
    let mut weights = vec![0.0; x.ncols()];
    for (&j, w) in screened.iter().zip(&refit.weights) {
        weights[j] = *w;
    }
    Ok(LogisticModel {
        weights,
        intercept: refit.intercept,
        feature_ids: default_ids(x.ncols()),
        lambda1: params.lambda1,
        lambda2: params.lambda2,
        provenance: ModelProvenance { representation: Representation::Channels, adaptive: true, screened: Some(screened) },
        converged: pilot.converged && refit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn screen_sizes() {
        assert_eq!(default_screen_size(2000), 263);
        assert_eq!(default_screen_size(1), 1);
    }

    #[test]
    fn label_feature_ranks_first() {
        let y = [true, false, false, true, true, false, true, false];
        let mut x = DMatrix::from_fn(8, 4, |i, j| ((i * 7 + j * 3) % 5) as f64);
        for (i, &v) in y.iter().enumerate() {
            x[(i, 2)] = if v { 1.0 } else { 0.0 };
        }
        assert_eq!(sis_screen(&x, &y, 1), vec![2]);
        let mut all = sis_screen(&x, &y, 10);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_gamma_weights_are_one() {
        assert_eq!(adaptive_weights(&[0.5, 0.0, -2.0], 100, 0.0), vec![1.0; 3]);
        assert_eq!(adaptive_weights(&[0.0, 0.0], 100, 1.0), vec![1.0; 2]);
        let w = adaptive_weights(&[1.0, 0.0], 100, 1.0);
        assert!((w[0] - 1.0 / 1.01).abs() < 1e-12 && (w[1] - 100.0).abs() < 1e-9);
    }
}
