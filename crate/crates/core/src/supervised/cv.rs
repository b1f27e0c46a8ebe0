//! Stratified k-fold cross-validation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tune::ModelParams;
use crate::eval::{auroc, ScoredSet};
use crate::{seed, stats, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mean_auroc: f64,
    pub fold_aurocs: Vec<f64>,
    /// Held-out probability for every instance.
    pub oof_scores: Vec<f64>,
    pub converged: bool,
}

/// Fold id per instance. Each class is shuffled and dealt round-robin, so
/// every fold holds both classes whenever each class has at least `k`
/// members.
pub fn stratified_folds(y: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    if pos.len() < k || neg.len() < k {
        return Err(Error::invalid(format!(
            "{k} stratified folds need at least {k} instances per class (have {} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let mut fold = vec![0; y.len()];
    let mut offset = 0;
    for mut class in [pos, neg] {
        let len = class.len();
        class.shuffle(&mut rng);
        for (r, i) in class.into_iter().enumerate() {
            fold[i] = (r + offset) % k;
        }
        offset += len;
    }
    Ok(fold)
}

/// Mean held-out AUROC across stratified folds.
pub fn cv_auroc(params: &ModelParams, x: &DMatrix<f64>, y: &[bool], folds: usize, seed: u64) -> Result<CvResult> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), got: x.nrows() });
    }
    let assignment = stratified_folds(y, folds, seed)?;
    let per_fold: Vec<Result<(Vec<usize>, Vec<f64>, bool)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] != f).collect();
            let test: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] == f).collect();
            let xt = x.select_rows(&train);
            let yt: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let model = params.fit(&xt, &yt)?;
            let scores = model.predict_rows(&x.select_rows(&test))?;
            Ok((test, scores, model.converged))
        })
        .collect();

    let mut oof = vec![0.0; y.len()];
    let mut fold_aurocs = Vec::with_capacity(folds);
    let mut converged = true;
    for r in per_fold {
        let (test, scores, conv) = r?;
        converged &= conv;
        let labels: Vec<bool> = test.iter().map(|&i| y[i]).collect();
        fold_aurocs.push(auroc(&ScoredSet::new(scores.clone(), labels)?)?);
        for (i, s) in test.into_iter().zip(scores) {
            oof[i] = s;
        }
    }
    Ok(CvResult { mean_auroc: stats::mean(&fold_aurocs), fold_aurocs, oof_scores: oof, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_stratified() {
        let y: Vec<bool> = (0..53).map(|i| i % 3 == 0).collect();
        let f = stratified_folds(&y, 10, 1).unwrap();
        for k in 0..10 {
            let members: Vec<usize> = (0..53).filter(|&i| f[i] == k).collect();
            assert!(members.iter().any(|&i| y[i]) && members.iter().any(|&i| !y[i]));
            assert!((5..=6).contains(&members.len()));
        }
        assert_eq!(f, stratified_folds(&y, 10, 1).unwrap());
        assert!(stratified_folds(&y[..20], 10, 1).is_err());
    }
}
