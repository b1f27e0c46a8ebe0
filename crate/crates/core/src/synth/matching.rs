//! Source matching by maximum-weight assignment.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ica::IcaModel;
use crate::{stats, Error, Result};

/// Minimum-cost assignment of rows to columns (`rows ≤ cols`), returning the
/// column chosen for each row.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "hungarian needs rows <= cols");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// Mean matched |corr|.
    pub score: f64,
    /// (recovered index, true index, |corr|).
    pub pairs: Vec<(usize, usize, f64)>,
    /// Set when the recovered and true source counts differ.
    pub k_mismatch: bool,
}

/// Matches recovered sources (rows) to true sources (rows) maximizing total
/// absolute correlation over the shared columns.
pub fn match_sources(recovered: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<RecoveryScore> {
    if recovered.ncols() != truth.ncols() {
        return Err(Error::DimensionMismatch { expected: truth.ncols(), got: recovered.ncols() });
    }
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect() };
    let (rec, tru) = (rows(recovered), rows(truth));
    let corr = DMatrix::from_fn(rec.len(), tru.len(), |i, j| {
        let c = stats::corr(&rec[i], &tru[j]).abs();
        if c.is_finite() {
            c
        } else {
            0.0
        }
    });
    let transposed = corr.nrows() > corr.ncols();
    let work = if transposed { corr.transpose() } else { corr.clone() };
    let assignment = hungarian(&work.map(|c| -c));
    let mut pairs: Vec<(usize, usize, f64)> = assignment
        .iter()
        .enumerate()
        .map(|(a, &b)| if transposed { (b, a, corr[(b, a)]) } else { (a, b, corr[(a, b)]) })
        .collect();
    pairs.sort_by_key(|p| p.0);
    let score = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len().max(1) as f64;
    Ok(RecoveryScore { score, pairs, k_mismatch: rec.len() != tru.len() })
}

/// Recovery of the true sources by `model` on the standardized
/// cross-sections `x_std` (p × n), given the true sources (k × n).
pub fn recovery_score(model: &IcaModel, x_std: &DMatrix<f64>, true_sources: &DMatrix<f64>) -> Result<RecoveryScore> {
    let score = match_sources(&model.source_matrix(x_std)?, true_sources)?;
    if score.k_mismatch {
        log::warn!("model has {} sources, truth has {}; matched {}", model.k(), true_sources.nrows(), score.pairs.len());
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn go(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.nrows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[(row, j)] + go(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost.ncols()])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = crate::seed::rng(8);
        for (n, m) in [(1, 1), (3, 3), (4, 6), (6, 6), (5, 7)] {
            for _ in 0..20 {
                let cost = DMatrix::from_fn(n, m, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
                let a = hungarian(&cost);
                let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
                assert!((total - brute_force(&cost)).abs() < 1e-12);
                let mut cols = a.clone();
                cols.sort_unstable();
                cols.dedup();
                assert_eq!(cols.len(), n);
            }
        }
    }

    #[test]
    fn invariant_to_sign_and_order() {
        let mut rng = crate::seed::rng(9);
        let truth = DMatrix::from_fn(4, 300, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let mut rec = DMatrix::zeros(4, 300);
        for (dst, (src, sign)) in [(2usize, 1.0), (0, -1.0), (3, 2.0), (1, -0.5)].into_iter().enumerate() {
            rec.set_row(dst, &(truth.row(src) * sign));
        }
        let s = match_sources(&rec, &truth).unwrap();
        assert!(s.score > 1.0 - 1e-12);
        assert_eq!(s.pairs.iter().map(|p| p.1).collect::<Vec<_>>(), vec![2, 0, 3, 1]);
        let fewer = match_sources(&rec.rows(0, 2).into_owned(), &truth).unwrap();
        assert!(fewer.k_mismatch && fewer.pairs.len() == 2);
        let more = match_sources(&truth, &rec.rows(0, 3).into_owned()).unwrap();
        assert_eq!(more.pairs.len(), 3);
        assert!(more.score > 1.0 - 1e-12);
    }
}
