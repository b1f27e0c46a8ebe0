//! Cross-section sampling and per-channel standardization.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{build_curveset, CurveParams, CurveSet, BASELINE_INTENSITY};
use crate::ehr::{ChannelId, ChannelKind, Cohort, Span};
use crate::{seed, stats, Error, Result};

/// Where a cross-section column came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub patient_id: String,
    pub day: i64,
}

/// p × n matrix of synchronized cross-sections.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossSectionMatrix {
    pub data: DMatrix<f64>,
    pub channels: Vec<ChannelId>,
    pub provenance: Vec<Provenance>,
}

/// Text sidecar stored next to the binary matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub channels: Vec<ChannelId>,
    pub provenance: Vec<Provenance>,
}

impl CrossSectionMatrix {
    pub fn p(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn sidecar(&self) -> MatrixSidecar {
        MatrixSidecar { channels: self.channels.clone(), provenance: self.provenance.clone() }
    }

    pub fn from_parts(data: DMatrix<f64>, sidecar: MatrixSidecar) -> Result<Self> {
        if data.nrows() != sidecar.channels.len() {
            return Err(Error::DimensionMismatch { expected: sidecar.channels.len(), got: data.nrows() });
        }
        if data.ncols() != sidecar.provenance.len() {
            return Err(Error::DimensionMismatch { expected: sidecar.provenance.len(), got: data.ncols() });
        }
        Ok(CrossSectionMatrix { data, channels: sidecar.channels, provenance: sidecar.provenance })
    }
}

/// Sample days for one record: `max(1, Poisson(density * years))` draws,
/// uniform over the span.
pub fn draw_sample_days(span: Span, density: f64, seed: u64) -> Vec<i64> {
    let mut rng = seed::rng(seed);
    let mean = density * span.years();
    let count = if mean > 0.0 {
        Poisson::new(mean).map(|d| d.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };
    (0..count.max(1)).map(|_| rng.random_range(span.first_day..=span.last_day)).collect()
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::invalid(format!("sampling density must be positive, got {density}")));
    }
    Ok(())
}

/// Draw cross-sections from precomputed curvesets.
pub fn sample_cross_sections(
    curvesets: &[CurveSet],
    channels: &[ChannelId],
    density: f64,
    base_seed: u64,
) -> Result<CrossSectionMatrix> {
    check_density(density)?;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut provenance = Vec::new();
    for cs in curvesets {
        if cs.values.nrows() != channels.len() {
            return Err(Error::DimensionMismatch { expected: channels.len(), got: cs.values.nrows() });
        }
        for day in draw_sample_days(cs.span, density, seed::derive(base_seed, &cs.patient_id)) {
            cols.push(cs.column_at(day));
            provenance.push(Provenance { patient_id: cs.patient_id.clone(), day });
        }
    }
    Ok(assemble(channels, cols, provenance))
}

fn assemble(channels: &[ChannelId], cols: Vec<Vec<f64>>, provenance: Vec<Provenance>) -> CrossSectionMatrix {
    let p = channels.len();
    let n = cols.len();
    let data = DMatrix::from_iterator(p, n, cols.into_iter().flatten());
    CrossSectionMatrix { data, channels: channels.to_vec(), provenance }
}

/// Build each record's curveset on the fly and draw its cross-sections.
///
/// Equivalent to [`sample_cross_sections`] over all curvesets, without
/// holding every curveset in memory. Records are processed in parallel;
/// output order follows the cohort.
pub fn sample_cohort(
    cohort: &Cohort,
    medians: &BTreeMap<String, f64>,
    params: &CurveParams,
    curve_seed: u64,
    density: f64,
    sample_seed: u64,
) -> Result<CrossSectionMatrix> {
    check_density(density)?;
    let per_record: Vec<Result<Vec<(Vec<f64>, Provenance)>>> = cohort
        .records
        .par_iter()
        .map(|rec| {
            let cs = build_curveset(rec, &cohort.catalog, medians, params, curve_seed)?;
            let days = draw_sample_days(rec.span, density, seed::derive(sample_seed, &rec.patient_id));
            Ok(days
                .into_iter()
                .map(|day| (cs.column_at(day), Provenance { patient_id: rec.patient_id.clone(), day }))
                .collect())
        })
        .collect();
    let mut cols = Vec::new();
    let mut provenance = Vec::new();
    for r in per_record {
        for (c, p) in r? {
            cols.push(c);
            provenance.push(p);
        }
    }
    Ok(assemble(&cohort.catalog, cols, provenance))
}

/// Column at the final day of the record.
pub fn last_cross_section(cs: &CurveSet) -> Vec<f64> {
    cs.column_at(cs.span.last_day)
}

/// Last cross-section of every record, as a p × n_records matrix.
pub fn last_cross_sections(
    cohort: &Cohort,
    medians: &BTreeMap<String, f64>,
    params: &CurveParams,
    curve_seed: u64,
) -> Result<CrossSectionMatrix> {
    let cols: Vec<Result<Vec<f64>>> = cohort
        .records
        .par_iter()
        .map(|rec| Ok(last_cross_section(&build_curveset(rec, &cohort.catalog, medians, params, curve_seed)?)))
        .collect();
    let cols = cols.into_iter().collect::<Result<Vec<_>>>()?;
    let provenance = cohort
        .records
        .iter()
        .map(|r| Provenance { patient_id: r.patient_id.clone(), day: r.span.last_day })
        .collect();
    Ok(assemble(&cohort.catalog, cols, provenance))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowTransform {
    /// Natural log, then center and scale.
    LogAffine,
    Affine,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowStandardizer {
    pub channel: ChannelId,
    pub transform: RowTransform,
    pub center: f64,
    /// Two standard deviations of the (possibly logged) fitting values.
    pub scale: f64,
}

impl RowStandardizer {
    fn pre(&self, v: f64) -> f64 {
        match self.transform {
            RowTransform::LogAffine => {
                if v <= 0.0 {
                    warn!("non-positive intensity {v} on {}; clamped to the floor", self.channel);
                    BASELINE_INTENSITY.ln()
                } else {
                    v.ln()
                }
            }
            _ => v,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        match self.transform {
            RowTransform::Identity => v,
            _ => (self.pre(v) - self.center) / self.scale,
        }
    }

    pub fn invert(&self, z: f64) -> f64 {
        match self.transform {
            RowTransform::Identity => z,
            RowTransform::Affine => self.center + z * self.scale,
            RowTransform::LogAffine => (self.center + z * self.scale).exp(),
        }
    }
}

/// Per-channel transforms fitted on the discovery cross-sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub rows: Vec<RowStandardizer>,
}

fn default_transform(ch: &ChannelId) -> RowTransform {
    if ch.is_binary() {
        RowTransform::Identity
    } else if ch.kind == ChannelKind::Code {
        RowTransform::LogAffine
    } else {
        RowTransform::Affine
    }
}

/// Fit the standardizer: code rows are logged, then code, measurement and
/// age rows are centered and divided by two standard deviations; binary rows
/// are left untouched. Rows with zero spread fall back to identity.
pub fn fit_standardizer(x: &CrossSectionMatrix) -> Result<Standardizer> {
    if x.n() == 0 {
        return Err(Error::invalid("cannot fit a standardizer on an empty matrix"));
    }
    let rows = x
        .channels
        .iter()
        .enumerate()
        .map(|(i, ch)| {
            let mut row = RowStandardizer {
                channel: ch.clone(),
                transform: default_transform(ch),
                center: 0.0,
                scale: 1.0,
            };
            if row.transform == RowTransform::Identity {
                return row;
            }
            let vals: Vec<f64> = x.data.row(i).iter().map(|v| row.pre(*v)).collect();
            let sd = stats::std_pop(&vals);
            let mean = stats::mean(&vals);
            if !(sd > 1e-12 * mean.abs().max(1.0)) {
                warn!("channel {ch} has zero spread; leaving it untransformed");
                row.transform = RowTransform::Identity;
                return row;
            }
            row.center = mean;
            row.scale = 2.0 * sd;
            row
        })
        .collect();
    Ok(Standardizer { rows })
}

impl Standardizer {
    pub fn p(&self) -> usize {
        self.rows.len()
    }

    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok(self.rows.iter().zip(x).map(|(r, v)| r.apply(*v)).collect())
    }

    pub fn invert_vec(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len())?;
        Ok(self.rows.iter().zip(z).map(|(r, v)| r.invert(*v)).collect())
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x.nrows())?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| self.rows[i].apply(x[(i, j)])))
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(z.nrows())?;
        Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| self.rows[i].invert(z[(i, j)])))
    }

    pub fn apply_matrix(&self, x: &CrossSectionMatrix) -> Result<CrossSectionMatrix> {
        Ok(CrossSectionMatrix {
            data: self.apply(&x.data)?,
            channels: x.channels.clone(),
            provenance: x.provenance.clone(),
        })
    }

    pub fn apply_dvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.apply_vec(x.as_slice())?))
    }

    fn check(&self, got: usize) -> Result<()> {
        if got != self.rows.len() {
            return Err(Error::DimensionMismatch { expected: self.rows.len(), got });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::ChannelKind;

    fn matrix(channels: Vec<ChannelId>, rows: Vec<Vec<f64>>) -> CrossSectionMatrix {
        let n = rows[0].len();
        let p = rows.len();
        let data = DMatrix::from_fn(p, n, |i, j| rows[i][j]);
        let provenance = (0..n).map(|j| Provenance { patient_id: "x".into(), day: j as i64 }).collect();
        CrossSectionMatrix { data, channels, provenance }
    }

    #[test]
    fn affine_row_scales_by_two_sd() {
        // mean 10, population SD 2
        let x = matrix(vec![ChannelId::new(ChannelKind::Measurement, "m")], vec![vec![8.0, 12.0, 8.0, 12.0]]);
        let s = fit_standardizer(&x).unwrap();
        assert!((s.rows[0].apply(14.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_rows_untouched_and_constant_rows_identity() {
        let x = matrix(
            vec![
                ChannelId::new(ChannelKind::Code, "c"),
                ChannelId::new(ChannelKind::Medication, "d"),
            ],
            vec![vec![0.05, 0.05, 0.05], vec![0.0, 1.0, 1.0]],
        );
        let s = fit_standardizer(&x).unwrap();
        assert_eq!(s.rows[0].transform, RowTransform::Identity);
        assert_eq!(s.rows[1].transform, RowTransform::Identity);
        assert_eq!(s.apply(&x.data).unwrap(), x.data);
    }

    #[test]
    fn zero_maps_back_to_center() {
        let x = matrix(
            vec![
                ChannelId::new(ChannelKind::Code, "c"),
                ChannelId::new(ChannelKind::Measurement, "m"),
            ],
            vec![vec![0.5, 2.0, 8.0], vec![1.0, 2.0, 6.0]],
        );
        let s = fit_standardizer(&x).unwrap();
        let back = s.invert_vec(&[0.0, 0.0]).unwrap();
        assert!((back[0] - s.rows[0].center.exp()).abs() < 1e-12);
        assert!((back[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_intensity_is_clamped() {
        let x = matrix(vec![ChannelId::new(ChannelKind::Code, "c")], vec![vec![0.5, 2.0, 8.0]]);
        let s = fit_standardizer(&x).unwrap();
        let z = s.apply_vec(&[-1.0]).unwrap()[0];
        assert!((z - s.apply_vec(&[BASELINE_INTENSITY]).unwrap()[0]).abs() < 1e-15);
    }

    #[test]
    fn short_record_still_sampled() {
        let span = Span::new(0, 36).unwrap();
        for s in 0..50 {
            assert!(!draw_sample_days(span, 1.0, s).is_empty());
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let x = matrix(vec![ChannelId::new(ChannelKind::Measurement, "m")], vec![vec![1.0, 2.0]]);
        let s = fit_standardizer(&x).unwrap();
        assert!(s.apply_vec(&[1.0, 2.0]).is_err());
    }
}
