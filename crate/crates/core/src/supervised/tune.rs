//! Two-step tuning: random search scored by CV AUROC, a DeLong CI-overlap
//! filter, then selection by mean out-of-bag AUROC.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adanet::{fit_adanet, AdanetParams};
use super::cv::cv_auroc;
use super::enet::fit_enet_logistic;
use super::{check_training_data, LogisticModel};
use crate::eval::{auroc, delong_ci_logistic, delong_variance, wald_ci, MetricCI, ScoredSet};
use crate::{seed, stats, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Enet,
    Adanet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelParams {
    Enet { lambda1: f64, lambda2: f64 },
    Adanet(AdanetParams),
}

impl ModelParams {
    pub fn fit(&self, x: &DMatrix<f64>, y: &[bool]) -> Result<LogisticModel> {
        match self {
            ModelParams::Enet { lambda1, lambda2 } => fit_enet_logistic(x, y, *lambda1, *lambda2),
            ModelParams::Adanet(p) => fit_adanet(x, y, p),
        }
    }
}

/// Log-uniform ranges for random search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamSpace {
    pub lambda1: (f64, f64),
    pub lambda2: (f64, f64),
    pub gamma: f64,
    pub screen_size: Option<usize>,
}

impl Default for ParamSpace {
    fn default() -> Self {
        ParamSpace { lambda1: (1e-4, 0.2), lambda2: (1e-4, 1.0), gamma: 1.0, screen_size: None }
    }
}

impl ParamSpace {
    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::invalid(format!("{name} range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }

    fn sample(&self, family: ModelFamily, rng: &mut impl Rng) -> ModelParams {
        let mut log_uniform = |(lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo.ln()..hi.ln()).exp()
            }
        };
        let lambda1 = log_uniform(self.lambda1);
        let lambda2 = log_uniform(self.lambda2);
        match family {
            ModelFamily::Enet => ModelParams::Enet { lambda1, lambda2 },
            ModelFamily::Adanet => {
                let pilot_lambda1 = log_uniform(self.lambda1);
                ModelParams::Adanet(AdanetParams {
                    screen_size: self.screen_size,
                    gamma: self.gamma,
                    pilot_lambda1,
                    pilot_lambda2: lambda2,
                    lambda1,
                    lambda2,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub family: ModelFamily,
    pub budget: usize,
    pub alpha_filter: f64,
    pub b_oob: usize,
    pub folds: usize,
    pub seed: u64,
    pub space: ParamSpace,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            family: ModelFamily::Enet,
            budget: 200,
            alpha_filter: 0.2,
            b_oob: 100,
            folds: 10,
            seed: 0,
            space: ParamSpace::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: ModelParams,
    pub cv_auroc: Option<f64>,
    /// Interval on pooled out-of-fold scores at level `1 − alpha_filter`.
    pub cv_ci: Option<MetricCI>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OobScore {
    pub trial: usize,
    pub mean_auroc: f64,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub options: TuneOptions,
    pub trials: Vec<Trial>,
    pub best_cv_trial: usize,
    pub comparable: Vec<usize>,
    pub oob: Vec<OobScore>,
    pub winner: usize,
    pub winner_params: ModelParams,
    /// Training-set AUROC of the refit winner with a Wald 95% interval.
    pub final_training_auroc: MetricCI,
}

fn overlaps(a: &MetricCI, b: &MetricCI) -> bool {
    a.lower <= b.upper && b.lower <= a.upper
}

/// In-bag and out-of-bag index sets shared by every surviving candidate.
fn oob_resamples(y: &[bool], b: usize, base: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let n = y.len();
    let cap = 10 * b.max(1);
    let mut redraws = 0;
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let rep_seed = seed::derive_index(base, r as u64);
        let mut attempt = 0u64;
        loop {
            let mut rng = seed::rng(seed::derive_index(rep_seed, attempt));
            let mut in_bag = vec![false; n];
            let idx: Vec<usize> = (0..n)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    in_bag[i] = true;
                    i
                })
                .collect();
            let oob: Vec<usize> = (0..n).filter(|&i| !in_bag[i]).collect();
            let has_both = |s: &[usize]| s.iter().any(|&i| y[i]) && s.iter().any(|&i| !y[i]);
            if has_both(&idx) && has_both(&oob) {
                out.push((idx, oob));
                break;
            }
            attempt += 1;
            redraws += 1;
            if redraws > cap {
                return Err(Error::Numerical(format!("out-of-bag resampling exceeded {cap} redraws")));
            }
        }
    }
    Ok(out)
}

/// Runs the three-step protocol and returns the report with the winner
/// refit on all of `x`.
pub fn tune(x: &DMatrix<f64>, y: &[bool], opts: &TuneOptions) -> Result<(TuningReport, LogisticModel)> {
    check_training_data(x, y)?;
    opts.space.validate()?;
    if opts.budget == 0 {
        return Err(Error::invalid("tuning budget must be at least 1"));
    }
    if !(opts.alpha_filter > 0.0 && opts.alpha_filter < 1.0) {
        return Err(Error::invalid(format!("alpha_filter must be in (0, 1), got {}", opts.alpha_filter)));
    }
    if opts.b_oob == 0 {
        return Err(Error::invalid("b_oob must be at least 1"));
    }
    let trial_seed = seed::derive(opts.seed, "trial");
    let fold_seed = seed::derive(opts.seed, "folds");
    let level = 1.0 - opts.alpha_filter;

    let trials: Vec<Trial> = (0..opts.budget)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed::derive_index(trial_seed, t as u64));
            let params = opts.space.sample(opts.family, &mut rng);
            let scored = cv_auroc(&params, x, y, opts.folds, fold_seed).and_then(|cv| {
                let ci = delong_ci_logistic(&ScoredSet::new(cv.oof_scores.clone(), y.to_vec())?, level)?;
                Ok((cv, ci))
            });
            match scored {
                Ok((cv, ci)) => Trial {
                    index: t,
                    params,
                    cv_auroc: Some(cv.mean_auroc),
                    cv_ci: Some(ci),
                    converged: cv.converged,
                    error: None,
                },
                Err(e) => {
                    Trial { index: t, params, cv_auroc: None, cv_ci: None, converged: false, error: Some(e.to_string()) }
                }
            }
        })
        .collect();

    let eligible: Vec<&Trial> = trials.iter().filter(|t| t.converged && t.cv_auroc.is_some()).collect();
    let Some(best) = eligible.iter().copied().reduce(|a, b| if b.cv_auroc > a.cv_auroc { b } else { a }) else {
        let failures: Vec<String> = trials
            .iter()
            .map(|t| format!("trial {}: {}", t.index, t.error.as_deref().unwrap_or("did not converge")))
            .collect();
        return Err(Error::Numerical(format!("no converged tuning trial; {}", failures.join("; "))));
    };
    let best_ci = best.cv_ci.clone().expect("scored trial has a CI");
    let comparable: Vec<usize> = eligible
        .iter()
        .filter(|t| overlaps(t.cv_ci.as_ref().expect("scored trial has a CI"), &best_ci))
        .map(|t| t.index)
        .collect();
    log::info!("{} of {} trials survive the CI-overlap filter", comparable.len(), trials.len());

    let resamples = oob_resamples(y, opts.b_oob, seed::derive(opts.seed, "oob"))?;
    let jobs: Vec<(usize, usize)> =
        comparable.iter().flat_map(|&t| (0..resamples.len()).map(move |r| (t, r))).collect();
    let scores: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(t, r)| {
            let (in_bag, oob) = &resamples[r];
            let yb: Vec<bool> = in_bag.iter().map(|&i| y[i]).collect();
            let model = trials[t].params.fit(&x.select_rows(in_bag), &yb).ok()?;
            let probs = model.predict_rows(&x.select_rows(oob)).ok()?;
            let labels: Vec<bool> = oob.iter().map(|&i| y[i]).collect();
            auroc(&ScoredSet::new(probs, labels).ok()?).ok()
        })
        .collect();

    let mut oob = Vec::with_capacity(comparable.len());
    for (c, &t) in comparable.iter().enumerate() {
        let chunk = &scores[c * resamples.len()..(c + 1) * resamples.len()];
        let ok: Vec<f64> = chunk.iter().flatten().copied().collect();
        if ok.len() < chunk.len() {
            log::warn!("trial {t}: {} of {} bootstrap refits failed", chunk.len() - ok.len(), chunk.len());
        }
        if !ok.is_empty() {
            oob.push(OobScore { trial: t, mean_auroc: stats::mean(&ok), replicates: ok.len() });
        }
    }
    let winner = oob
        .iter()
        .reduce(|a, b| if b.mean_auroc > a.mean_auroc { b } else { a })
        .map(|s| s.trial)
        .unwrap_or(best.index);

    let winner_params = trials[winner].params.clone();
    let model = winner_params.fit(x, y)?;
    let train = ScoredSet::new(model.predict_rows(x)?, y.to_vec())?;
    let variance = match delong_variance(&train) {
        Ok(dv) => dv.variance,
        Err(Error::InvalidInput(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let final_training_auroc = wald_ci(auroc(&train)?, variance, 0.95);
    let report = TuningReport {
        options: opts.clone(),
        best_cv_trial: best.index,
        trials,
        comparable,
        oob,
        winner,
        winner_params,
        final_training_auroc,
    };
    Ok((report, model))
}
