//! Dense daily-resolution curves for each channel of a patient record.
//!
//! Each modality has its own process:
//!
//! * codes: adaptive RASH intensity in events/year ([`rash`]), or the
//!   constant baseline of 1/20 events/year when the record has no events;
//! * measurements: PCHIP through the observed values, or the population
//!   median when the record has no observations;
//! * medications: binary exposure inferred from visit medication lists;
//! * demographics: constant sex/race indicators and integer age.
//!
//! No smoothing is applied after the curves are computed.

mod pchip;
mod rash;

use std::collections::{BTreeMap, HashMap};

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use pchip::Pchip;
pub use rash::code_intensity_curve;

use crate::ehr::{ChannelId, ChannelKind, Cohort, Demographics, PatientRecord, Span, AGE_CHANNEL, RACE_PREFIX, SEX_CHANNEL};
use crate::{seed, stats, Error, Result};

/// Baseline code intensity for records with no events: 1/20 events/year.
pub const BASELINE_INTENSITY: f64 = 1.0 / 20.0;

const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveParams {
    /// Number of shifted histograms averaged (R).
    pub histograms: usize,
    /// Neighbour rank used for the adaptive bin width (m).
    pub neighbor_rank: usize,
    pub min_bandwidth_days: f64,
    pub max_bandwidth_days: f64,
    /// Added to every estimated intensity, in events/year.
    pub intensity_floor: f64,
}

impl Default for CurveParams {
    fn default() -> Self {
        CurveParams {
            histograms: 16,
            neighbor_rank: 5,
            min_bandwidth_days: 7.0,
            max_bandwidth_days: 730.0,
            intensity_floor: BASELINE_INTENSITY,
        }
    }
}

impl CurveParams {
    pub fn validate(&self) -> Result<()> {
        if self.histograms == 0 || self.neighbor_rank == 0 {
            return Err(Error::invalid("histograms and neighbor_rank must be >= 1"));
        }
        if !(self.min_bandwidth_days >= 1.0 && self.max_bandwidth_days >= self.min_bandwidth_days) {
            return Err(Error::invalid("bandwidth bounds must satisfy 1 <= min <= max"));
        }
        if !(self.intensity_floor > 0.0) {
            return Err(Error::invalid("intensity_floor must be positive"));
        }
        Ok(())
    }
}

/// One channel's values, one per day starting at `start_day`.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub start_day: i64,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn constant(span: Span, value: f64) -> Self {
        Curve { start_day: span.first_day, values: vec![value; span.len()] }
    }

    pub fn at(&self, day: i64) -> f64 {
        self.values[(day - self.start_day) as usize]
    }
}

/// Constant baseline intensity used when a record has no events for a code.
pub fn impute_code_baseline(span: Span) -> Curve {
    Curve::constant(span, BASELINE_INTENSITY)
}

/// PCHIP curve through the observations, sampled daily over the span.
///
/// Same-day duplicates keep the last value (with a warning when the values
/// conflict). The curve is constant before the first and after the last
/// observation.
pub fn measurement_curve(observations: &[(i64, f64)], span: Span) -> Result<Curve> {
    if observations.is_empty() {
        return Err(Error::invalid("measurement curve needs at least one observation"));
    }
    let mut obs = observations.to_vec();
    obs.sort_by_key(|o| o.0);
    let mut xs: Vec<f64> = Vec::with_capacity(obs.len());
    let mut ys: Vec<f64> = Vec::with_capacity(obs.len());
    let mut last_day = None;
    for (day, value) in obs {
        if !value.is_finite() {
            return Err(Error::invalid("non-finite measurement value"));
        }
        if last_day == Some(day) {
            let prev = ys.last_mut().expect("previous value");
            if *prev != value {
                warn!("conflicting measurements on day {day}: keeping {value} over {prev}");
            }
            *prev = value;
        } else {
            xs.push(day as f64);
            ys.push(value);
            last_day = Some(day);
        }
    }
    let interp = Pchip::new(xs, ys);
    let values = (span.first_day..=span.last_day).map(|d| interp.eval(d as f64)).collect();
    Ok(Curve { start_day: span.first_day, values })
}

/// Constant curve at the discovery-set population median.
pub fn impute_measurement(population_median: f64, span: Span) -> Curve {
    Curve::constant(span, population_median)
}

/// Binary exposure curve from visit medication lists.
///
/// Exposure continues between contiguous visits that both note the drug. If
/// the drug is noted at one visit and missing at the next, exposure stops at
/// the midpoint day (rounded up, so the noted visit itself is always exposed).
/// After the last noted visit with no later visit, exposure continues to the
/// end of the record. Days before the first mention are 0.
pub fn medication_curve(visit_days: &[i64], noted_days: &[i64], span: Span) -> Curve {
    let mut values = vec![0.0; span.len()];
    let mut visits = visit_days.to_vec();
    visits.extend_from_slice(noted_days);
    visits.sort_unstable();
    visits.dedup();
    let noted = |d: i64| noted_days.contains(&d);
    let idx = |d: i64| (d - span.first_day) as usize;

    for (i, &v) in visits.iter().enumerate() {
        if !noted(v) {
            continue;
        }
        let end = match visits.get(i + 1) {
            Some(&next) if noted(next) => next,
            Some(&next) => {
                let gap = next - v;
                v + (gap + 1) / 2 - 1
            }
            None => span.last_day,
        };
        for d in v.max(span.first_day)..=end.min(span.last_day) {
            values[idx(d)] = 1.0;
        }
    }
    Curve { start_day: span.first_day, values }
}

/// Whole years of age on `day`, using 365.25-day years.
pub fn age_on(day: i64, birth_day: i64) -> f64 {
    ((day - birth_day) as f64 / DAYS_PER_YEAR).floor()
}

/// Curves for the demographic channels of `catalog` (in catalog order).
pub fn demographic_curves(demo: &Demographics, catalog: &[ChannelId], span: Span) -> Vec<(ChannelId, Curve)> {
    catalog
        .iter()
        .filter(|c| c.kind == ChannelKind::Demographic)
        .map(|c| (c.clone(), demographic_curve(demo, &c.name, span)))
        .collect()
}

fn demographic_curve(demo: &Demographics, name: &str, span: Span) -> Curve {
    if name == SEX_CHANNEL {
        Curve::constant(span, if demo.female { 1.0 } else { 0.0 })
    } else if name == AGE_CHANNEL {
        Curve {
            start_day: span.first_day,
            values: (span.first_day..=span.last_day).map(|d| age_on(d, demo.birth_day)).collect(),
        }
    } else {
        let race = name.strip_prefix(RACE_PREFIX).unwrap_or(name);
        Curve::constant(span, if demo.races.contains(race) { 1.0 } else { 0.0 })
    }
}

/// Discovery-set medians of observed values, per measurement channel.
pub fn population_medians(cohort: &Cohort) -> BTreeMap<String, f64> {
    let mut pooled: HashMap<&str, Vec<f64>> = HashMap::new();
    for rec in &cohort.records {
        for m in &rec.measurements {
            pooled.entry(m.channel.as_str()).or_default().push(m.value);
        }
    }
    pooled.into_iter().map(|(k, v)| (k.to_string(), stats::median(&v))).collect()
}

/// A patient's p × τ matrix of curves; rows follow the catalog order.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSet {
    pub patient_id: String,
    pub span: Span,
    pub values: DMatrix<f64>,
}

impl CurveSet {
    /// Column at an absolute day.
    pub fn column_at(&self, day: i64) -> Vec<f64> {
        let j = (day - self.span.first_day) as usize;
        self.values.column(j).iter().copied().collect()
    }

    /// Write the matrix as CSV, one row per channel, one column per day.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (self.span.first_day..=self.span.last_day).map(|d| d.to_string()).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in self.values.row_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Build a patient's curveset against `catalog`, imputing channels the
/// record does not observe.
pub fn build_curveset(
    record: &PatientRecord,
    catalog: &[ChannelId],
    medians: &BTreeMap<String, f64>,
    params: &CurveParams,
    base_seed: u64,
) -> Result<CurveSet> {
    let span = record.span;
    let tau = span.len();
    let mut values = DMatrix::zeros(catalog.len(), tau);
    let patient_seed = seed::derive(base_seed, &record.patient_id);
    let visit_days = record.visit_days();

    for (row, ch) in catalog.iter().enumerate() {
        let curve = match ch.kind {
            ChannelKind::Code => {
                let days = record.code_days(&ch.name);
                if days.is_empty() {
                    impute_code_baseline(span)
                } else {
                    code_intensity_curve(&days, span, params, seed::derive(patient_seed, &ch.name))?
                }
            }
            ChannelKind::Measurement => {
                let obs = record.measurement_points(&ch.name);
                if obs.is_empty() {
                    let median = medians
                        .get(&ch.name)
                        .copied()
                        .ok_or_else(|| Error::UnobservedChannel(ch.name.clone()))?;
                    impute_measurement(median, span)
                } else {
                    measurement_curve(&obs, span)?
                }
            }
            ChannelKind::Medication => {
                medication_curve(&visit_days, &record.medication_days(&ch.name), span)
            }
            ChannelKind::Demographic => {
                let demo = record.demographics.as_ref().ok_or_else(|| {
                    Error::invalid(format!("patient `{}` has no demographics", record.patient_id))
                })?;
                demographic_curve(demo, &ch.name, span)
            }
        };
        for (j, v) in curve.values.iter().enumerate() {
            values[(row, j)] = *v;
        }
    }
    Ok(CurveSet { patient_id: record.patient_id.clone(), span, values })
}
