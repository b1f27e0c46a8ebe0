//! Penalized logistic models and the two-step tuning protocol.
//!
//! Design matrices are `n × d` with one instance per row. Features are used
//! as given; callers standardize beforehand.

mod adanet;
mod cv;
mod enet;
mod tune;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use adanet::{adaptive_weights, default_screen_size, fit_adanet, sis_screen, AdanetParams};
pub use cv::{cv_auroc, stratified_folds, CvResult};
pub use enet::{fit_enet_logistic, fit_enet_path, fit_enet_weighted, EnetFit, EnetOptions};
pub use tune::{tune, ModelFamily, ModelParams, OobScore, ParamSpace, Trial, TuneOptions, TuningReport};

use crate::{stats, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Channels,
    Signatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub representation: Representation,
    pub adaptive: bool,
    /// Screened feature indices for adaptive fits.
    pub screened: Option<Vec<usize>>,
}

/// Logistic model in log-odds units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub feature_ids: Vec<String>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub provenance: ModelProvenance,
    pub converged: bool,
}

impl LogisticModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Attaches feature names and the representation they come from.
    pub fn with_features(mut self, ids: Vec<String>, representation: Representation) -> Result<Self> {
        if ids.len() != self.weights.len() {
            return Err(Error::DimensionMismatch { expected: self.weights.len(), got: ids.len() });
        }
        self.feature_ids = ids;
        self.provenance.representation = representation;
        Ok(self)
    }

    pub fn log_odds(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch { expected: self.weights.len(), got: x.len() });
        }
        Ok(self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }

    /// Log-odds for every row of `x`.
    pub fn log_odds_rows(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.weights.len() {
            return Err(Error::DimensionMismatch { expected: self.weights.len(), got: x.ncols() });
        }
        let w = DVector::from_column_slice(&self.weights);
        Ok((x * w).add_scalar(self.intercept))
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.log_odds_rows(x)?.iter().map(|&e| stats::sigmoid(e)).collect())
    }

    pub fn nonzero(&self) -> Vec<usize> {
        self.weights.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(j, _)| j).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: LogisticModel = serde_json::from_slice(&std::fs::read(path)?)?;
        if model.feature_ids.len() != model.weights.len() {
            return Err(Error::DimensionMismatch { expected: model.weights.len(), got: model.feature_ids.len() });
        }
        Ok(model)
    }
}

/// `sigmoid(intercept + w·x)`.
pub fn predict_proba(model: &LogisticModel, x: &[f64]) -> Result<f64> {
    model.log_odds(x).map(stats::sigmoid)
}

pub(crate) fn check_training_data(x: &DMatrix<f64>, y: &[bool]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), got: x.nrows() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("design matrix contains non-finite values"));
    }
    let pos = y.iter().filter(|v| **v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::SingleClass);
    }
    Ok(())
}

pub(crate) fn default_ids(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(weights: Vec<f64>, intercept: f64) -> LogisticModel {
        let d = weights.len();
        LogisticModel {
            weights,
            intercept,
            feature_ids: default_ids(d),
            lambda1: 0.0,
            lambda2: 0.0,
            provenance: ModelProvenance { representation: Representation::Channels, adaptive: false, screened: None },
            converged: true,
        }
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict_proba(&model(vec![0.0, 0.0], 0.0), &[3.0, -1.0]).unwrap(), 0.5);
        let p = predict_proba(&model(vec![3f64.ln()], 0.0), &[1.0]).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
        let m = model(vec![0.4, -1.0], 0.2);
        assert!(predict_proba(&m, &[1.0, 0.0]).unwrap() > predict_proba(&m, &[0.5, 0.0]).unwrap());
        assert!(predict_proba(&m, &[1.0]).is_err());
    }

    #[test]
    fn json_round_trip_keeps_ids() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model(vec![0.5, 0.0, -2.0], 0.1);
        m.feature_ids = vec!["source_0".into(), "source_1".into(), "source_2".into()];
        m.provenance = ModelProvenance { representation: Representation::Signatures, adaptive: true, screened: Some(vec![0, 2]) };
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(LogisticModel::load(&path).unwrap(), m);
    }
}
