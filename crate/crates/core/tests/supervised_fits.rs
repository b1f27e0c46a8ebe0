use ehrsig_core::eval::auroc;
use ehrsig_core::supervised::{
    cv_auroc, default_screen_size, fit_adanet, fit_enet_logistic, fit_enet_path, fit_enet_weighted, sis_screen, tune,
    AdanetParams, EnetOptions, ModelFamily, ModelParams, ParamSpace, TuneOptions,
};
use ehrsig_core::{eval::ScoredSet, seed, stats};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Standard-normal design with a known sparse logistic truth.
fn sparse_problem(seed: u64, n: usize, p: usize, support: &[(usize, f64)]) -> (DMatrix<f64>, Vec<bool>) {
    let mut rng = seed::rng(seed);
    let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let y = (0..n)
        .map(|i| {
            let eta: f64 = support.iter().map(|&(j, b)| b * x[(i, j)]).sum();
            rng.random::<f64>() < stats::sigmoid(eta)
        })
        .collect();
    (x, y)
}

const TRUTH: [(usize, f64); 5] = [(3, 1.0), (17, -1.0), (42, 0.8), (99, -0.9), (150, 1.2)];

/// Unpenalized maximum likelihood by Newton–Raphson on `[1, X]`.
fn newton_mle(x: &DMatrix<f64>, y: &[bool]) -> DVector<f64> {
    let n = x.nrows();
    let design = DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let yv = DVector::from_iterator(n, y.iter().map(|&v| if v { 1.0 } else { 0.0 }));
    let mut beta = DVector::zeros(design.ncols());
    for _ in 0..100 {
        let p = (&design * &beta).map(stats::sigmoid);
        let w = p.map(|v| v * (1.0 - v));
        let grad = design.transpose() * (&yv - &p);
        let mut hess = DMatrix::zeros(design.ncols(), design.ncols());
        for i in 0..n {
            let row = design.row(i);
            hess += w[i] * row.transpose() * row;
        }
        let step = hess.lu().solve(&grad).unwrap();
        beta += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    beta
}

#[test]
fn unpenalized_fit_matches_newton() {
    let (x, y) = sparse_problem(1, 80, 3, &[(0, 0.7), (2, -0.5)]);
    let oracle = newton_mle(&x, &y);
    let m = fit_enet_logistic(&x, &y, 0.0, 0.0).unwrap();
    assert!((m.intercept - oracle[0]).abs() < 1e-4);
    for j in 0..3 {
        assert!((m.weights[j] - oracle[j + 1]).abs() < 1e-4, "weight {j}: {} vs {}", m.weights[j], oracle[j + 1]);
    }
}

#[test]
fn duplicated_features_share_weight() {
    let (mut x, y) = sparse_problem(2, 200, 3, &[(0, 1.0), (1, -0.5)]);
    x = x.insert_column(3, 0.0);
    let col = x.column(0).clone_owned();
    x.set_column(3, &col);
    let m = fit_enet_logistic(&x, &y, 0.01, 0.1).unwrap();
    assert!(m.weights[0] != 0.0);
    assert!((m.weights[0] - m.weights[3]).abs() < 1e-6, "{} vs {}", m.weights[0], m.weights[3]);
}

#[test]
fn objective_decreases_every_step() {
    let (x, y) = sparse_problem(3, 300, 20, &[(1, 2.0), (5, -1.5), (7, 1.0)]);
    for (l1, l2) in [(0.0, 0.0), (0.01, 0.0), (0.05, 0.5), (0.001, 0.01)] {
        let fit = fit_enet_weighted(&x, &y, l1, l2, &[1.0; 20], None, &EnetOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-13 * w[0].max(1.0)), "λ=({l1},{l2})");
    }
}

/// Symmetric two-point data where the intercept is zero and the optimal
/// weight has a closed form.
#[test]
fn single_feature_soft_threshold() {
    let (a, b) = (30usize, 10usize);
    let mut xs = Vec::new();
    let mut y = Vec::new();
    for (x, label, count) in [(1.0, true, a), (1.0, false, b), (-1.0, true, b), (-1.0, false, a)] {
        for _ in 0..count {
            xs.push(x);
            y.push(label);
        }
    }
    let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
    let q = a as f64 / (a + b) as f64;
    for l1 in [0.0, 0.05, 0.1, 0.2, 0.3] {
        let m = fit_enet_logistic(&x, &y, l1, 0.0).unwrap();
        let shrunk = (q - 0.5 - l1).max(0.0);
        let expected = stats::logit(0.5 + shrunk);
        assert!((m.weights[0] - expected).abs() < 1e-8, "λ1={l1}: {} vs {expected}", m.weights[0]);
        assert!(m.intercept.abs() < 1e-8);
    }
}

#[test]
fn sparsity_is_monotone_along_path() {
    let (x, y) = sparse_problem(4, 400, 30, &[(0, 1.5), (4, -1.0), (9, 0.6), (20, 0.3)]);
    let lambdas: Vec<f64> = (0..40).map(|i| 1e-4 * 1.25f64.powi(i)).collect();
    let fits = fit_enet_path(&x, &y, &lambdas, 0.01).unwrap();
    let nnz: Vec<usize> = fits.iter().map(|f| f.weights.iter().filter(|w| w.abs() > 1e-10).count()).collect();
    assert!(nnz.windows(2).all(|w| w[1] <= w[0]), "{nnz:?}");
    assert_eq!(*nnz.last().unwrap(), 0);
}

#[test]
fn adanet_reduces_to_enet() {
    let (x, y) = sparse_problem(5, 300, 12, &[(0, 1.0), (3, -1.0)]);
    let params = AdanetParams {
        screen_size: Some(50),
        gamma: 0.0,
        pilot_lambda1: 0.02,
        pilot_lambda2: 0.1,
        lambda1: 0.01,
        lambda2: 0.1,
    };
    let ada = fit_adanet(&x, &y, &params).unwrap();
    let enet = fit_enet_logistic(&x, &y, 0.01, 0.1).unwrap();
    for (a, e) in ada.weights.iter().zip(&enet.weights) {
        assert!((a - e).abs() < 1e-6);
    }
    assert!((ada.intercept - enet.intercept).abs() < 1e-6);
}

#[test]
fn screening_keeps_true_support() {
    let n = 2000;
    let d = default_screen_size(n);
    let hits = (0..50u64)
        .into_par_iter()
        .filter(|&t| {
            let (x, y) = sparse_problem(1000 + t, n, 200, &TRUTH);
            let kept = sis_screen(&x, &y, d);
            TRUTH.iter().all(|(j, _)| kept.contains(j))
        })
        .count();
    assert!(hits >= 45, "{hits}/50");
}

#[test]
fn adanet_recovers_support() {
    let params = AdanetParams {
        screen_size: None,
        gamma: 1.0,
        pilot_lambda1: 0.02,
        pilot_lambda2: 0.01,
        lambda1: 0.02,
        lambda2: 0.01,
    };
    let mut truth: Vec<usize> = TRUTH.iter().map(|(j, _)| *j).collect();
    truth.sort_unstable();
    let hits = (0..50u64)
        .into_par_iter()
        .filter(|&t| {
            let (x, y) = sparse_problem(2000 + t, 2000, 200, &TRUTH);
            fit_adanet(&x, &y, &params).unwrap().nonzero() == truth
        })
        .count();
    assert!(hits >= 40, "{hits}/50");
}

#[test]
fn cv_on_separable_data_is_perfect() {
    let n = 60;
    let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64 - 0.5);
    let y: Vec<bool> = (0..n).map(|i| i >= n / 2).collect();
    let params = ModelParams::Enet { lambda1: 0.0, lambda2: 0.0 };
    let cv = cv_auroc(&params, &x, &y, 10, 3).unwrap();
    assert_eq!(cv.mean_auroc, 1.0);
    assert_eq!(cv, cv_auroc(&params, &x, &y, 10, 3).unwrap());
}

#[test]
fn cv_under_the_null() {
    let params = ModelParams::Enet { lambda1: 0.01, lambda2: 0.1 };
    let inside = (0..40u64)
        .into_par_iter()
        .filter(|&s| {
            let mut rng = seed::rng(seed::derive_index(77, s));
            let x = DMatrix::from_fn(1000, 5, |_, _| StandardNormal.sample(&mut rng));
            let y: Vec<bool> = (0..1000).map(|_| rng.random()).collect();
            let a = cv_auroc(&params, &x, &y, 10, s).unwrap().mean_auroc;
            (0.4..=0.6).contains(&a)
        })
        .count();
    assert!(inside >= 38, "{inside}/40");
}

fn small_tune(space: ParamSpace, budget: usize, seed: u64) -> TuneOptions {
    TuneOptions { family: ModelFamily::Enet, budget, b_oob: 20, folds: 5, seed, space, ..Default::default() }
}

#[test]
fn tuning_budget_one() {
    let (x, y) = sparse_problem(6, 150, 6, &[(0, 1.0)]);
    let (report, model) = tune(&x, &y, &small_tune(ParamSpace::default(), 1, 1)).unwrap();
    assert_eq!(report.winner, 0);
    assert_eq!(report.comparable, vec![0]);
    assert!(report.final_training_auroc.lower <= report.final_training_auroc.point);
    let train = ScoredSet::new(model.predict_rows(&x).unwrap(), y).unwrap();
    assert_eq!(auroc(&train).unwrap(), report.final_training_auroc.point);
}

#[test]
fn identical_candidates_all_survive() {
    let (x, y) = sparse_problem(7, 150, 6, &[(0, 1.0)]);
    let space = ParamSpace { lambda1: (0.01, 0.01), lambda2: (0.1, 0.1), ..Default::default() };
    let (report, _) = tune(&x, &y, &small_tune(space, 4, 2)).unwrap();
    assert_eq!(report.comparable, vec![0, 1, 2, 3]);
    assert!(report.comparable.contains(&report.winner));
}

#[test]
fn dominant_configuration_wins() {
    let wins = (0..20u64)
        .into_par_iter()
        .filter(|&s| {
            let (x, y) = sparse_problem(3000 + s, 200, 8, &[(0, 1.5), (1, -1.5)]);
            // Large λ1 zeroes every weight, giving chance-level AUROC.
            let space = ParamSpace { lambda1: (1e-3, 20.0), lambda2: (1e-3, 1e-3), ..Default::default() };
            let (report, _) = tune(&x, &y, &small_tune(space, 4, s)).unwrap();
            let best = report.trials[report.best_cv_trial].cv_auroc.unwrap();
            let win = report.trials[report.winner].cv_auroc.unwrap();
            assert!(report.comparable.contains(&report.best_cv_trial));
            best - win < 0.15
        })
        .count();
    assert!(wins >= 19, "{wins}/20");
}
