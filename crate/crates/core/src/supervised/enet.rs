//! Elastic-net logistic regression by proximal Newton steps, each solved
//! with cyclic coordinate descent and soft-thresholding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_training_data, default_ids, LogisticModel, ModelProvenance, Representation};
use crate::{stats, Error, Result};

const MIN_CURVATURE: f64 = 1e-5;
/// Objective differences below this relative size are rounding noise.
const ROUNDING: f64 = 1e-13;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnetOptions {
    /// Convergence threshold on the largest coefficient change.
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for EnetOptions {
    fn default() -> Self {
        EnetOptions { tol: 1e-7, max_outer: 100, max_inner: 2000 }
    }
}

#[derive(Clone, Debug)]
pub struct EnetFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Objective after each accepted outer step, starting with the initial point.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

fn softplus(e: f64) -> f64 {
    if e > 0.0 {
        e + (-e).exp().ln_1p()
    } else {
        e.exp().ln_1p()
    }
}

fn linear_predictor(x: &DMatrix<f64>, w: &[f64], b: f64) -> Vec<f64> {
    let mut eta = vec![b; x.nrows()];
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            for (e, v) in eta.iter_mut().zip(x.column(j).iter()) {
                *e += wj * v;
            }
        }
    }
    eta
}

struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: Vec<f64>,
    lambda1: f64,
    lambda2: f64,
    penalty: &'a [f64],
}

impl Problem<'_> {
    fn objective_at(&self, eta: &[f64], w: &[f64]) -> f64 {
        let loss = eta.iter().zip(&self.y).map(|(&e, &y)| softplus(e) - y * e).sum::<f64>() / eta.len() as f64;
        let l1: f64 = w.iter().zip(self.penalty).filter(|(wj, _)| **wj != 0.0).map(|(wj, v)| v * wj.abs()).sum();
        let l2: f64 = w.iter().map(|v| v * v).sum();
        loss + self.lambda1 * l1 + 0.5 * self.lambda2 * l2
    }

    /// Coordinate descent on the weighted least-squares model of the loss
    /// around `eta`; returns the minimizer of that penalized quadratic.
    fn newton_target(&self, eta: &[f64], w: &[f64], b: f64, opts: &EnetOptions) -> (Vec<f64>, f64) {
        let n = eta.len() as f64;
        let mut curv = Vec::with_capacity(eta.len());
        let mut resid = Vec::with_capacity(eta.len());
        for (&e, &y) in eta.iter().zip(&self.y) {
            let p = stats::sigmoid(e);
            let c = (p * (1.0 - p)).max(MIN_CURVATURE);
            curv.push(c);
            resid.push((y - p) / c);
        }
        let col_curv: Vec<f64> = (0..self.x.ncols())
            .map(|j| self.x.column(j).iter().zip(&curv).map(|(v, c)| c * v * v).sum::<f64>() / n)
            .collect();
        let mut q = Quadratic { problem: self, curv, col_curv, resid, w: w.to_vec(), b };
        let inner_tol = opts.tol * 0.1;
        let mut sweeps = 0;
        while sweeps < opts.max_inner {
            sweeps += 1;
            if q.sweep(false) < inner_tol {
                break;
            }
            for _ in 0..ACTIVE_SWEEPS {
                sweeps += 1;
                if q.sweep(true) < inner_tol {
                    break;
                }
            }
            q.polish();
        }
        (q.w, q.b)
    }
}

/// Sweeps over the active set between exact polish steps.
const ACTIVE_SWEEPS: usize = 2;

/// Penalized weighted least-squares subproblem with its running residual.
struct Quadratic<'a, 'p> {
    problem: &'a Problem<'p>,
    curv: Vec<f64>,
    col_curv: Vec<f64>,
    /// Working response minus the current fit.
    resid: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Quadratic<'_, '_> {
    fn shift_intercept(&mut self, delta: f64) {
        if delta != 0.0 {
            self.b += delta;
            self.resid.iter_mut().for_each(|r| *r -= delta);
        }
    }

    fn move_weight(&mut self, j: usize, delta: f64) {
        if delta != 0.0 {
            for (r, x) in self.resid.iter_mut().zip(self.problem.x.column(j).iter()) {
                *r -= delta * x;
            }
            self.w[j] += delta;
        }
    }

    /// One cyclic pass (intercept first); returns the largest change.
    fn sweep(&mut self, active_only: bool) -> f64 {
        let pb = self.problem;
        let n = self.resid.len() as f64;
        let curv_sum: f64 = self.curv.iter().sum();
        let shift = self.resid.iter().zip(&self.curv).map(|(r, c)| r * c).sum::<f64>() / curv_sum;
        self.shift_intercept(shift);
        let mut max_change = shift.abs();
        for j in 0..self.w.len() {
            let v = pb.penalty[j];
            let denom = self.col_curv[j] + pb.lambda2;
            if !v.is_finite() || denom <= 0.0 || (active_only && self.w[j] == 0.0) {
                continue;
            }
            let col = pb.x.column(j);
            let grad = col.iter().zip(&self.resid).zip(&self.curv).map(|((x, r), c)| c * x * r).sum::<f64>() / n;
            let updated = soft_threshold(grad + self.col_curv[j] * self.w[j], pb.lambda1 * v) / denom;
            let delta = updated - self.w[j];
            if delta != 0.0 {
                self.move_weight(j, delta);
                self.w[j] = updated;
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    /// Solves the stationarity equations on the current support with the
    /// current signs held fixed. The step stops where a weight would change
    /// sign, and that weight is set to zero.
    fn polish(&mut self) {
        let pb = self.problem;
        let active: Vec<usize> = (0..self.w.len()).filter(|&j| self.w[j] != 0.0).collect();
        let m = active.len() + 1;
        let n = self.resid.len() as f64;
        let rows = self.resid.len();
        let root: Vec<f64> = self.curv.iter().map(|c| c.sqrt()).collect();
        let design = DMatrix::from_fn(rows, m, |i, a| if a == 0 { root[i] } else { root[i] * pb.x[(i, active[a - 1])] });
        let scaled = DVector::from_iterator(rows, self.resid.iter().zip(&root).map(|(r, s)| r * s));
        let mut lhs = design.tr_mul(&design);
        let mut rhs = design.tr_mul(&scaled);
        lhs /= n;
        rhs /= n;
        for (a, &j) in active.iter().enumerate() {
            lhs[(a + 1, a + 1)] += pb.lambda2;
            rhs[a + 1] -= pb.lambda1 * pb.penalty[j] * self.w[j].signum() + pb.lambda2 * self.w[j];
        }
        let Some(step) = lhs.clone().cholesky().map(|c| c.solve(&rhs)).or_else(|| lhs.lu().solve(&rhs)) else {
            return;
        };
        if step.iter().any(|v| !v.is_finite()) {
            return;
        }
        let mut t = 1.0f64;
        let mut blocking = None;
        for (a, &j) in active.iter().enumerate() {
            let d = step[a + 1];
            if self.w[j] * (self.w[j] + d) < 0.0 {
                let hit = -self.w[j] / d;
                if hit < t {
                    t = hit;
                    blocking = Some(j);
                }
            }
        }
        self.shift_intercept(t * step[0]);
        for (a, &j) in active.iter().enumerate() {
            self.move_weight(j, t * step[a + 1]);
        }
        if let Some(j) = blocking {
            let rest = -self.w[j];
            self.move_weight(j, rest);
            self.w[j] = 0.0;
        }
    }
}

fn validate_lambdas(lambda1: f64, lambda2: f64) -> Result<()> {
    if !(lambda1 >= 0.0 && lambda1.is_finite() && lambda2 >= 0.0 && lambda2.is_finite()) {
        return Err(Error::invalid(format!("penalties must be finite and non-negative, got λ1={lambda1}, λ2={lambda2}")));
    }
    Ok(())
}

/// Minimizes `mean logloss + λ1·Σ v_j|w_j| + (λ2/2)‖w‖²` with per-feature
/// L1 factors `v_j`; an infinite factor pins the weight at zero. The
/// intercept is unpenalized.
pub fn fit_enet_weighted(
    x: &DMatrix<f64>,
    y: &[bool],
    lambda1: f64,
    lambda2: f64,
    penalty: &[f64],
    warm: Option<(&[f64], f64)>,
    opts: &EnetOptions,
) -> Result<EnetFit> {
    check_training_data(x, y)?;
    validate_lambdas(lambda1, lambda2)?;
    if penalty.len() != x.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), got: penalty.len() });
    }
    if penalty.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::invalid("penalty factors must be non-negative"));
    }
    let yf: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let (mut w, mut b) = match warm {
        Some((w0, b0)) => {
            if w0.len() != x.ncols() {
                return Err(Error::DimensionMismatch { expected: x.ncols(), got: w0.len() });
            }
            let w: Vec<f64> = w0.iter().zip(penalty).map(|(w, v)| if v.is_finite() { *w } else { 0.0 }).collect();
            (w, b0)
        }
        None => (vec![0.0; x.ncols()], stats::logit(stats::mean(&yf))),
    };
    let problem = Problem { x, y: yf, lambda1, lambda2, penalty };

    let mut eta = linear_predictor(x, &w, b);
    let mut current = problem.objective_at(&eta, &w);
    let mut trace = vec![current];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_outer {
        iterations += 1;
        let (w_new, b_new) = problem.newton_target(&eta, &w, b, opts);
        let dw: Vec<f64> = w_new.iter().zip(&w).map(|(a, c)| a - c).collect();
        let db = b_new - b;
        let full_step = dw.iter().fold(db.abs(), |m, v| m.max(v.abs()));
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let w_try: Vec<f64> = w.iter().zip(&dw).map(|(a, d)| a + t * d).collect();
            let b_try = b + t * db;
            let eta_try = linear_predictor(x, &w_try, b_try);
            let f = problem.objective_at(&eta_try, &w_try);
            if f <= current + ROUNDING * current.abs().max(1.0) {
                accepted = Some((w_try, b_try, eta_try, f));
                break;
            }
            t *= 0.5;
        }
        let Some((w_try, b_try, eta_try, f)) = accepted else {
            converged = full_step < opts.tol;
            break;
        };
        w = w_try;
        b = b_try;
        eta = eta_try;
        current = f;
        trace.push(f);
        if t * full_step < opts.tol {
            converged = true;
            break;
        }
    }
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::Numerical("elastic net produced non-finite weights".into()));
    }
    Ok(EnetFit { weights: w, intercept: b, objective_trace: trace, iterations, converged })
}

/// Elastic-net logistic fit with uniform L1 penalty.
pub fn fit_enet_logistic(x: &DMatrix<f64>, y: &[bool], lambda1: f64, lambda2: f64) -> Result<LogisticModel> {
    let fit = fit_enet_weighted(x, y, lambda1, lambda2, &vec![1.0; x.ncols()], None, &EnetOptions::default())?;
    if !fit.converged {
        log::warn!("elastic net hit the iteration cap (λ1={lambda1}, λ2={lambda2})");
    }
    Ok(LogisticModel {
        weights: fit.weights,
        intercept: fit.intercept,
        feature_ids: default_ids(x.ncols()),
        lambda1,
        lambda2,
        provenance: ModelProvenance { representation: Representation::Channels, adaptive: false, screened: None },
        converged: fit.converged,
    })
}

/// Fits along `lambda1s` in the given order, warm-starting each fit from the previous one.
pub fn fit_enet_path(x: &DMatrix<f64>, y: &[bool], lambda1s: &[f64], lambda2: f64) -> Result<Vec<EnetFit>> {
    let penalty = vec![1.0; x.ncols()];
    let opts = EnetOptions::default();
    let mut fits: Vec<EnetFit> = Vec::with_capacity(lambda1s.len());
    for &l1 in lambda1s {
        let warm = fits.last().map(|f| (f.weights.as_slice(), f.intercept));
        let fit = fit_enet_weighted(x, y, l1, lambda2, &penalty, warm, &opts)?;
        fits.push(fit);
    }
    Ok(fits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn full_shrinkage_gives_base_rate() {
        let x = DMatrix::from_row_slice(6, 2, &[1.0, 0.2, -0.3, 1.1, 0.7, -1.0, 0.1, 0.4, -0.9, 0.3, 0.5, -0.2]);
        let y = [true, false, true, true, false, false];
        let m = fit_enet_logistic(&x, &y, 1e3, 0.1).unwrap();
        assert_eq!(m.weights, vec![0.0, 0.0]);
        assert!((m.intercept - stats::logit(0.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        assert!(fit_enet_logistic(&x, &[true, false], 0.1, 0.1).is_err());
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(matches!(fit_enet_logistic(&x, &[true, true], 0.1, 0.1), Err(Error::SingleClass)));
        assert!(fit_enet_logistic(&x, &[true, false], -1.0, 0.1).is_err());
    }
}
