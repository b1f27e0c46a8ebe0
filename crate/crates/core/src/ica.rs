//! FastICA decomposition `X = A S` of standardized cross-sections.
//!
//! The centered data are whitened onto their top `k` principal directions,
//! then a symmetric (parallel) fixed-point iteration with the log-cosh
//! contrast finds an orthogonal rotation that maximizes non-Gaussianity.
//! The unmixing matrix is rotation · whitening (k × p) and the mixing matrix
//! is its pseudoinverse, so `unmix · A = I_k` and `A · unmix` is the
//! orthogonal projector onto the whitened subspace.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{matrix_io, seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcaParams {
    pub k: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IcaParams {
    fn default() -> Self {
        IcaParams { k: 50, seed: 0, tol: 1e-4, max_iter: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcaMetadata {
    pub k: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub iterations: usize,
    pub final_change: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcaModel {
    /// p × k; columns are signatures.
    pub mixing: DMatrix<f64>,
    /// k × p.
    pub unmixing: DMatrix<f64>,
    pub row_means: DVector<f64>,
    pub meta: IcaMetadata,
}

fn symmetric_eigen_desc(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Iterations without a new smallest change before the step is halved.
const STALL_ITERATIONS: usize = 20;
const MIN_STEP: f64 = 1.0 / 64.0;

/// `(W Wᵀ)^{-1/2} W`
fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = symmetric_eigen_desc(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(
        vals.len(),
        vals.iter().map(|v| 1.0 / v.max(1e-14).sqrt()),
    ));
    &vecs * inv_sqrt * vecs.transpose() * w
}

/// Top-k principal directions (p × k) and their variances.
fn principal_directions(xc: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (p, n) = xc.shape();
    let (vals, dirs) = if p <= n {
        let cov = (xc * xc.transpose()) / n as f64;
        symmetric_eigen_desc(cov)
    } else {
        let gram = (xc.transpose() * xc) / n as f64;
        let (vals, v) = symmetric_eigen_desc(gram);
        let mut u = xc * &v;
        for (j, lam) in vals.iter().enumerate() {
            let norm = (n as f64 * lam.max(0.0)).sqrt();
            if norm > 0.0 {
                u.column_mut(j).scale_mut(1.0 / norm);
            }
        }
        (vals, u)
    };
    let top = vals.first().copied().unwrap_or(0.0);
    let rank = vals.iter().filter(|v| **v > top * 1e-10 && **v > 0.0).count();
    if k > rank {
        return Err(Error::RankDeficient { requested: k, rank });
    }
    Ok((dirs.columns(0, k).into_owned(), vals[..k].to_vec()))
}

/// Fit FastICA with `params.k` sources on a p × n matrix (columns are samples).
///
/// Non-convergence is not an error: the returned model is usable and
/// `meta.converged` is false.
pub fn fit_ica(x: &DMatrix<f64>, params: &IcaParams) -> Result<IcaModel> {
    let (p, n) = x.shape();
    let k = params.k;
    if k == 0 || k > p.min(n) {
        return Err(Error::invalid(format!("k = {k} must be in 1..=min(p, n) = {}", p.min(n))));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("ICA input contains non-finite values"));
    }
    let row_means = x.column_mean();
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        col -= &row_means;
    }

    let (dirs, variances) = principal_directions(&xc, k)?;
    let sqrt_var: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let mut whitening = dirs.transpose();
    for (i, s) in sqrt_var.iter().enumerate() {
        whitening.row_mut(i).scale_mut(1.0 / s);
    }
    let z = &whitening * &xc;

    let mut rng = seed::rng(params.seed);
    let w0 = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&w0);

    let nf = n as f64;
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    let mut converged = false;
    // Step size of the stabilized update; 1 is the plain fixed-point rule.
    let mut step = 1.0;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for it in 1..=params.max_iter {
        let wz = &w * &z;
        let g = wz.map(f64::tanh);
        let mut w_next = (&g * z.transpose()) / nf;
        for i in 0..k {
            let g_prime_mean = g.row(i).iter().map(|v| 1.0 - v * v).sum::<f64>() / nf;
            let beta = wz.row(i).iter().zip(g.row(i).iter()).map(|(y, gy)| y * gy).sum::<f64>() / nf;
            // (β − E g')·w + step·(E[z g] − β·w); equals E[z g] − E g'·w at step 1.
            let keep = (beta - g_prime_mean) - step * beta;
            let wi = w.row(i) * keep;
            let mut row = w_next.row_mut(i);
            row *= step;
            row += wi;
        }
        let w_next = symmetric_decorrelation(&w_next);
        change = (0..k)
            .map(|i| (w_next.row(i).dot(&w.row(i)).abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = w_next;
        iterations = it;
        if change < params.tol {
            converged = true;
            break;
        }
        if change < best {
            best = change;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= STALL_ITERATIONS && step > MIN_STEP {
                step *= 0.5;
                best = change;
                stalled = 0;
            }
        }
    }
    if !converged {
        warn!("FastICA did not converge in {} iterations (change {change:.3e})", params.max_iter);
    }

    let mut unmixing = &w * &whitening;
    let mut scaled_dirs = dirs.clone();
    for (j, s) in sqrt_var.iter().enumerate() {
        scaled_dirs.column_mut(j).scale_mut(*s);
    }
    let mut mixing = scaled_dirs * w.transpose();

    // Orient each signature so its largest-magnitude loading is positive.
    for j in 0..k {
        let col = mixing.column(j);
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        if mixing[(imax, j)] < 0.0 {
            mixing.column_mut(j).neg_mut();
            unmixing.row_mut(j).neg_mut();
        }
    }

    Ok(IcaModel {
        mixing,
        unmixing,
        row_means,
        meta: IcaMetadata {
            k,
            seed: params.seed,
            tol: params.tol,
            max_iter: params.max_iter,
            iterations,
            final_change: change,
            converged,
        },
    })
}

impl IcaModel {
    pub fn k(&self) -> usize {
        self.mixing.ncols()
    }

    pub fn p(&self) -> usize {
        self.mixing.nrows()
    }

    /// Source expressions of one standardized cross-section.
    pub fn express(&self, x_std: &DVector<f64>) -> Result<DVector<f64>> {
        if x_std.len() != self.p() {
            return Err(Error::DimensionMismatch { expected: self.p(), got: x_std.len() });
        }
        Ok(&self.unmixing * (x_std - &self.row_means))
    }

    /// `A s + row_means`.
    pub fn reconstruct(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        if s.len() != self.k() {
            return Err(Error::DimensionMismatch { expected: self.k(), got: s.len() });
        }
        Ok(&self.mixing * s + &self.row_means)
    }

    /// k × n matrix of source expressions, one column per input column.
    pub fn source_matrix(&self, x_std: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x_std.nrows() != self.p() {
            return Err(Error::DimensionMismatch { expected: self.p(), got: x_std.nrows() });
        }
        let mut xc = x_std.clone();
        for mut col in xc.column_iter_mut() {
            col -= &self.row_means;
        }
        Ok(&self.unmixing * xc)
    }

    /// Save as a matrix container plus a JSON manifest next to it.
    pub fn save(&self, matrices: &Path, manifest: &Path) -> Result<()> {
        let means = DMatrix::from_column_slice(self.p(), 1, self.row_means.as_slice());
        matrix_io::save(
            matrices,
            &[("mixing", &self.mixing), ("unmixing", &self.unmixing), ("row_means", &means)],
        )?;
        std::fs::write(manifest, serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(matrices: &Path, manifest: &Path) -> Result<Self> {
        let mut entries = matrix_io::load(matrices)?;
        let mixing = matrix_io::take(&mut entries, "mixing")?;
        let unmixing = matrix_io::take(&mut entries, "unmixing")?;
        let means = matrix_io::take(&mut entries, "row_means")?;
        let meta: IcaMetadata = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
        if unmixing.shape() != (mixing.ncols(), mixing.nrows()) || means.nrows() != mixing.nrows() {
            return Err(Error::invalid("inconsistent ICA model shapes"));
        }
        Ok(IcaModel { mixing, unmixing, row_means: DVector::from_column_slice(means.as_slice()), meta })
    }
}
