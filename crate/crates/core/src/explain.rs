//! Linear SHAP attribution, importance distributions and root-cause reports.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::supervised::{LogisticModel, Representation};
use crate::{seed, Error, Result};

/// Attribution of one instance's log-odds to its features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub feature_values: Vec<f64>,
    pub feature_ids: Vec<String>,
    /// Model log-odds for the instance.
    pub output: f64,
    pub representation: Representation,
}

fn check_dim(model: &LogisticModel, got: usize) -> Result<()> {
    if got != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got });
    }
    Ok(())
}

/// `φ_i = w_i (x_i − μ_i)` with base value `b + w·μ`.
pub fn linear_shap(model: &LogisticModel, x: &[f64], background_means: &[f64]) -> Result<ShapExplanation> {
    check_dim(model, x.len())?;
    check_dim(model, background_means.len())?;
    let phi = model.weights.iter().zip(x).zip(background_means).map(|((w, v), m)| w * (v - m)).collect();
    let base_value = model.intercept + model.weights.iter().zip(background_means).map(|(w, m)| w * m).sum::<f64>();
    Ok(ShapExplanation {
        base_value,
        phi,
        feature_values: x.to_vec(),
        feature_ids: model.feature_ids.clone(),
        output: model.log_odds(x)?,
        representation: model.provenance.representation,
    })
}

/// Mean `|φ_i|` over the rows of `x_test`.
pub fn global_importance(model: &LogisticModel, x_test: &DMatrix<f64>, background_means: &[f64]) -> Result<Vec<f64>> {
    check_dim(model, x_test.ncols())?;
    check_dim(model, background_means.len())?;
    if x_test.nrows() == 0 {
        return Err(Error::invalid("importance needs at least one test instance"));
    }
    let n = x_test.nrows() as f64;
    Ok((0..model.dim())
        .map(|j| {
            let (w, m) = (model.weights[j], background_means[j]);
            x_test.column(j).iter().map(|v| (w * (v - m)).abs()).sum::<f64>() / n
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceDistribution {
    pub feature_ids: Vec<String>,
    /// `samples[j][b]`: importance of feature `j` under refit `b`.
    pub samples: Vec<Vec<f64>>,
    /// Share of successful refits where the feature's importance is nonzero.
    pub nonzero_frequency: Vec<f64>,
    pub replicates: usize,
    pub skipped: usize,
}

/// Global importance on a fixed test set across bootstrap refits of the
/// training data. Failed refits are skipped; more than 10% failures is an
/// error.
pub fn importance_distribution<F>(
    train_fn: F,
    x_train: &DMatrix<f64>,
    y_train: &[bool],
    x_test: &DMatrix<f64>,
    background_means: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<ImportanceDistribution>
where
    F: Fn(&DMatrix<f64>, &[bool]) -> Result<LogisticModel> + Sync,
{
    if replicates < 10 {
        return Err(Error::invalid(format!("importance distribution needs at least 10 replicates, got {replicates}")));
    }
    if x_train.nrows() != y_train.len() {
        return Err(Error::DimensionMismatch { expected: y_train.len(), got: x_train.nrows() });
    }
    let n = x_train.nrows();
    let results: Vec<Result<(Vec<String>, Vec<f64>)>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::rng(seed::derive_index(seed, b as u64));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let yb: Vec<bool> = idx.iter().map(|&i| y_train[i]).collect();
            let model = train_fn(&x_train.select_rows(&idx), &yb)?;
            let imp = global_importance(&model, x_test, background_means)?;
            Ok((model.feature_ids, imp))
        })
        .collect();

    let d = x_test.ncols();
    let mut samples = vec![Vec::with_capacity(replicates); d];
    let mut feature_ids = None;
    let mut skipped = 0;
    for r in results {
        match r {
            Ok((ids, imp)) => {
                feature_ids.get_or_insert(ids);
                for (j, v) in imp.into_iter().enumerate() {
                    samples[j].push(v);
                }
            }
            Err(e) => {
                log::warn!("importance refit skipped: {e}");
                skipped += 1;
            }
        }
    }
    if skipped * 10 > replicates {
        return Err(Error::Numerical(format!("{skipped} of {replicates} importance refits failed")));
    }
    let done = (replicates - skipped) as f64;
    let nonzero_frequency = samples.iter().map(|s| s.iter().filter(|v| **v != 0.0).count() as f64 / done).collect();
    Ok(ImportanceDistribution {
        feature_ids: feature_ids.unwrap_or_default(),
        samples,
        nonzero_frequency,
        replicates,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    RootCause,
    Protective,
    Inert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootCauseEntry {
    pub feature_id: String,
    pub phi: f64,
    pub attribution: Attribution,
    pub value: f64,
    /// Sign of the model coefficient: +1 toward the positive label, −1 away, 0 unused.
    pub weight_sign: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootCauseReport {
    pub tau_inert: f64,
    pub output: f64,
    pub base_value: f64,
    /// Ordered by `|φ|` descending; ties keep feature order.
    pub entries: Vec<RootCauseEntry>,
}

fn classify(phi: f64, tau: f64) -> Attribution {
    if phi > tau {
        Attribution::RootCause
    } else if phi < -tau {
        Attribution::Protective
    } else {
        Attribution::Inert
    }
}

/// Sign-based labelling of every feature's contribution. `weights` supplies
/// coefficient directions and may be empty.
pub fn root_cause_report(explanation: &ShapExplanation, weights: &[f64], tau_inert: f64) -> Result<RootCauseReport> {
    if !(tau_inert >= 0.0) {
        return Err(Error::invalid(format!("tau_inert must be non-negative, got {tau_inert}")));
    }
    if !weights.is_empty() && weights.len() != explanation.phi.len() {
        return Err(Error::DimensionMismatch { expected: explanation.phi.len(), got: weights.len() });
    }
    let mut order: Vec<usize> = (0..explanation.phi.len()).collect();
    order.sort_by(|&a, &b| explanation.phi[b].abs().total_cmp(&explanation.phi[a].abs()));
    let entries = order
        .into_iter()
        .map(|j| RootCauseEntry {
            feature_id: explanation.feature_ids.get(j).cloned().unwrap_or_else(|| format!("x{j}")),
            phi: explanation.phi[j],
            attribution: classify(explanation.phi[j], tau_inert),
            value: explanation.feature_values[j],
            weight_sign: weights.get(j).map_or(0, |w| if *w > 0.0 { 1 } else if *w < 0.0 { -1 } else { 0 }),
        })
        .collect();
    Ok(RootCauseReport { tau_inert, output: explanation.output, base_value: explanation.base_value, entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterfallStep {
    pub label: String,
    pub phi: f64,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waterfall {
    pub base_value: f64,
    pub output: f64,
    pub steps: Vec<WaterfallStep>,
}

/// The `top_m` largest contributions followed by one residual step; the
/// last step ends at the model output.
pub fn waterfall_data(explanation: &ShapExplanation, top_m: usize) -> Result<Waterfall> {
    if top_m == 0 {
        return Err(Error::invalid("top_m must be at least 1"));
    }
    let d = explanation.phi.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| explanation.phi[b].abs().total_cmp(&explanation.phi[a].abs()));
    let shown = top_m.min(d);
    let mut steps = Vec::with_capacity(shown + 1);
    let mut level = explanation.base_value;
    for &j in &order[..shown] {
        let phi = explanation.phi[j];
        let label = explanation.feature_ids.get(j).cloned().unwrap_or_else(|| format!("x{j}"));
        steps.push(WaterfallStep { label, phi, start: level, end: level + phi });
        level += phi;
    }
    if shown < d {
        let phi: f64 = order[shown..].iter().map(|&j| explanation.phi[j]).sum();
        steps.push(WaterfallStep { label: format!("{} other features", d - shown), phi, start: level, end: level + phi });
    }
    if let Some(last) = steps.last_mut() {
        last.end = explanation.output;
    }
    Ok(Waterfall { base_value: explanation.base_value, output: explanation.output, steps })
}
