//! Synthetic cohorts with known latent sources.
//!
//! Each patient carries `k` independent source trajectories. A source holds
//! a unit-variance Laplace level and redraws it at exponential waiting times,
//! so its marginal stays Laplace while consecutive days stay correlated.
//! Code channels are Poisson with log-intensity `base + a·s`, measurements are
//! affine in `a·s` plus noise, and a medication is noted at a visit whenever
//! `a·s` exceeds the channel threshold. Labels are Bernoulli on the
//! designated sources at the last record day.

mod direct;
mod matching;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use direct::{direct_cross_sections, laplace, DirectSample};
pub use matching::{hungarian, match_sources, recovery_score, RecoveryScore};

use crate::ehr::{ChannelId, ChannelKind, CodeEvent, Cohort, Demographics, Measurement, PatientRecord, Span, Visit};
use crate::{seed, stats, Error, Result};

const DAYS_PER_YEAR: f64 = 365.25;
const RACES: [&str; 3] = ["group_a", "group_b", "group_c"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub p: usize,
    pub k: usize,
    pub n_patients: usize,
    pub years_mean: f64,
    pub seed: u64,
    /// Mean years between level changes of a source.
    pub regime_years: f64,
    /// Number of label-driving sources.
    pub designated: usize,
    /// Magnitude of each designated source's label weight.
    pub label_strength: f64,
    /// Range of baseline code rates (events per year).
    pub code_rate: (f64, f64),
    pub measurement_rate: f64,
    pub visit_rate: f64,
    /// Measurement noise in units of the channel spread.
    pub measurement_noise: f64,
    pub medication_threshold: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            p: 60,
            k: 10,
            n_patients: 500,
            years_mean: 8.0,
            seed: 0,
            regime_years: 4.0,
            designated: 3,
            label_strength: 2.7,
            code_rate: (4.0, 12.0),
            measurement_rate: 6.0,
            visit_rate: 4.0,
            measurement_noise: 0.1,
            medication_threshold: 0.3,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.p < 3 {
            return Err(Error::invalid("p must be at least 3"));
        }
        if self.k == 0 || self.k > self.p {
            return Err(Error::invalid(format!("k must be in 1..=p, got {}", self.k)));
        }
        if self.n_patients == 0 {
            return Err(Error::invalid("n_patients must be at least 1"));
        }
        if self.designated > self.k {
            return Err(Error::invalid("designated sources exceed k"));
        }
        let positive = [
            ("years_mean", self.years_mean),
            ("regime_years", self.regime_years),
            ("measurement_rate", self.measurement_rate),
            ("visit_rate", self.visit_rate),
            ("code_rate.0", self.code_rate.0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.code_rate.1 < self.code_rate.0 {
            return Err(Error::invalid("code_rate upper bound below lower bound"));
        }
        if !(self.label_strength >= 0.0 && self.measurement_noise >= 0.0) {
            return Err(Error::invalid("label_strength and measurement_noise must be non-negative"));
        }
        Ok(())
    }

    /// Channel counts per kind: (codes, measurements, medications).
    pub fn layout(&self) -> (usize, usize, usize) {
        let meas = (self.p / 5).max(1);
        let meds = (2 * self.p / 15).max(1);
        (self.p - meas - meds, meas, meds)
    }
}

/// How one channel responds to the sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelTruth {
    pub channel: ChannelId,
    /// Row of the true mixing matrix (length k).
    pub loadings: Vec<f64>,
    /// Log base rate per year (codes), center (measurements) or threshold
    /// (medications).
    pub offset: f64,
    /// Measurement spread; 1 for other kinds.
    pub spread: f64,
}

/// Level changes of one source: `(first day, level)` pairs.
pub type Regimes = Vec<(i64, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub span: Span,
    pub sources: Vec<Regimes>,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: SynthParams,
    pub channels: Vec<ChannelTruth>,
    pub designated: Vec<usize>,
    pub label_weights: Vec<f64>,
    pub label_intercept: f64,
    pub patients: Vec<PatientTruth>,
}

fn level_at(regimes: &Regimes, day: i64) -> f64 {
    let i = regimes.partition_point(|(d, _)| *d <= day);
    regimes[i.saturating_sub(1)].1
}

impl GroundTruth {
    /// p × k mixing matrix in generator order.
    pub fn mixing(&self) -> DMatrix<f64> {
        let k = self.params.k;
        DMatrix::from_fn(self.channels.len(), k, |i, j| self.channels[i].loadings[j])
    }

    pub fn sources_at(&self, patient: &PatientTruth, day: i64) -> Vec<f64> {
        patient.sources.iter().map(|r| level_at(r, day)).collect()
    }

    pub fn patient(&self, patient_id: &str) -> Option<&PatientTruth> {
        self.patients
            .binary_search_by(|p| p.patient_id.as_str().cmp(patient_id))
            .ok()
            .map(|i| &self.patients[i])
    }

    /// Designated-source log-odds at the last record day.
    pub fn label_log_odds(&self, patient: &PatientTruth) -> f64 {
        let s = self.sources_at(patient, patient.span.last_day);
        self.label_intercept + self.designated.iter().zip(&self.label_weights).map(|(&d, w)| w * s[d]).sum::<f64>()
    }
}

pub struct SyntheticCohort {
    /// Events with demographics attached.
    pub cohort: Cohort,
    pub labels: BTreeMap<String, bool>,
    pub truth: GroundTruth,
}

fn signed_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random::<bool>() {
        v
    } else {
        -v
    }
}

/// Each channel loads on its own "home" source (cycling through the
/// sources) plus up to two more at random.
fn channel_truths(params: &SynthParams) -> Vec<ChannelTruth> {
    let mut rng = seed::rng(seed::derive(params.seed, "channels"));
    let (n_codes, n_meas, n_meds) = params.layout();
    let k = params.k;
    let mut out = Vec::with_capacity(params.p);
    let loadings = |rng: &mut rand_chacha::ChaCha8Rng, idx: usize, lo: f64, hi: f64| {
        let mut row = vec![0.0; k];
        row[idx % k] = signed_uniform(rng, lo, hi);
        for _ in 0..2.min(k - 1) {
            let j = rng.random_range(0..k);
            if row[j] == 0.0 {
                row[j] = signed_uniform(rng, lo, hi);
            }
        }
        row
    };
    for i in 0..n_codes {
        let row = loadings(&mut rng, i, 0.3, 0.8);
        let rate = rng.random_range(params.code_rate.0..=params.code_rate.1);
        out.push(ChannelTruth { channel: ChannelId::new(ChannelKind::Code, format!("C{:03}", i + 1)), loadings: row, offset: rate.ln(), spread: 1.0 });
    }
    for i in 0..n_meas {
        let row = loadings(&mut rng, i, 0.5, 1.5);
        let center = rng.random_range(10.0..100.0);
        let spread = rng.random_range(1.0..20.0);
        out.push(ChannelTruth { channel: ChannelId::new(ChannelKind::Measurement, format!("M{:02}", i + 1)), loadings: row, offset: center, spread });
    }
    for i in 0..n_meds {
        let row = loadings(&mut rng, i + n_meas, 0.5, 1.5);
        out.push(ChannelTruth {
            channel: ChannelId::new(ChannelKind::Medication, format!("R{:02}", i + 1)),
            loadings: row,
            offset: params.medication_threshold,
            spread: 1.0,
        });
    }
    out
}

fn draw_regimes(rng: &mut impl Rng, span: Span, regime_days: f64) -> Regimes {
    let waiting = Exp::new(1.0 / regime_days).expect("positive rate");
    let mut out = Vec::new();
    let mut day = span.first_day;
    while day <= span.last_day {
        out.push((day, laplace(rng)));
        let gap: f64 = waiting.sample(rng);
        day += (gap.ceil() as i64).max(1);
    }
    out
}

fn poisson(rng: &mut impl Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as usize
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct PatientDraw {
    record: PatientRecord,
    truth: PatientTruth,
}

fn draw_patient(
    index: usize,
    params: &SynthParams,
    channels: &[ChannelTruth],
    designated: &[usize],
    weights: &[f64],
) -> PatientDraw {
    let mut rng = seed::rng(seed::derive_index(seed::derive(params.seed, "patient"), index as u64));
    let years = params.years_mean * rng.random_range(0.5..1.5);
    let len = ((years * DAYS_PER_YEAR).round() as i64).max(30);
    let first_day = rng.random_range(0..3650);
    let span = Span { first_day, last_day: first_day + len - 1 };
    let years = span.years();
    let sources: Vec<Regimes> =
        (0..params.k).map(|_| draw_regimes(&mut rng, span, params.regime_years * DAYS_PER_YEAR)).collect();
    let at = |day: i64| -> Vec<f64> { sources.iter().map(|r| level_at(r, day)).collect() };

    let mut change_days: Vec<i64> = sources.iter().flat_map(|r| r.iter().map(|(d, _)| *d)).collect();
    change_days.sort_unstable();
    change_days.dedup();

    let mut code_events = Vec::new();
    let mut measurements = Vec::new();
    let mut visit_days: Vec<i64> = vec![span.first_day, span.last_day];
    let n_visits = poisson(&mut rng, params.visit_rate * years);
    visit_days.extend((0..n_visits).map(|_| rng.random_range(span.first_day..=span.last_day)));
    visit_days.sort_unstable();
    visit_days.dedup();

    for ch in channels {
        match ch.channel.kind {
            ChannelKind::Code => {
                for (w, &start) in change_days.iter().enumerate() {
                    let end = change_days.get(w + 1).map_or(span.last_day, |d| d - 1);
                    let s = at(start);
                    let per_day = (ch.offset + dot(&ch.loadings, &s)).exp() / DAYS_PER_YEAR;
                    let count = poisson(&mut rng, per_day * (end - start + 1) as f64);
                    for _ in 0..count {
                        code_events.push(CodeEvent { channel: ch.channel.name.clone(), day: rng.random_range(start..=end) });
                    }
                }
            }
            ChannelKind::Measurement => {
                let count = poisson(&mut rng, params.measurement_rate * years);
                for _ in 0..count {
                    let day = rng.random_range(span.first_day..=span.last_day);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let value = ch.offset + ch.spread * (dot(&ch.loadings, &at(day)) + params.measurement_noise * z);
                    measurements.push(Measurement { channel: ch.channel.name.clone(), day, value });
                }
            }
            _ => {}
        }
    }
    let visits = visit_days
        .iter()
        .map(|&day| {
            let s = at(day);
            let medications = channels
                .iter()
                .filter(|c| c.channel.kind == ChannelKind::Medication && dot(&c.loadings, &s) > c.offset)
                .map(|c| c.channel.name.clone())
                .collect();
            Visit { day, medications }
        })
        .collect();
    code_events.sort_by(|a, b| a.day.cmp(&b.day).then_with(|| a.channel.cmp(&b.channel)));
    measurements.sort_by(|a, b| a.day.cmp(&b.day).then_with(|| a.channel.cmp(&b.channel)));
    // Same-day repeats of a measurement keep only one reading.
    measurements.dedup_by(|a, b| a.day == b.day && a.channel == b.channel);

    let end = at(span.last_day);
    let eta: f64 = designated.iter().zip(weights).map(|(&d, w)| w * end[d]).sum();
    let label = rng.random::<f64>() < stats::sigmoid(eta);

    let age_years = rng.random_range(18.0..70.0);
    let demographics = Demographics {
        female: rng.random::<bool>(),
        races: [RACES.choose(&mut rng).expect("non-empty").to_string()].into_iter().collect(),
        birth_day: first_day - (age_years * DAYS_PER_YEAR).round() as i64,
    };
    let patient_id = format!("P{:05}", index + 1);
    PatientDraw {
        record: PatientRecord {
            patient_id: patient_id.clone(),
            span,
            code_events,
            measurements,
            visits,
            demographics: Some(demographics),
        },
        truth: PatientTruth { patient_id, span, sources, label },
    }
}

/// Label weights alternate in sign: `(+c, −c, +c, …)`.
pub fn label_weights(params: &SynthParams) -> Vec<f64> {
    (0..params.designated)
        .map(|i| if i % 2 == 0 { params.label_strength } else { -params.label_strength })
        .collect()
}

/// Generates the cohort, its labels and the ground truth.
pub fn generate_cohort(params: &SynthParams) -> Result<SyntheticCohort> {
    params.validate()?;
    let channels = channel_truths(params);
    let designated: Vec<usize> = (0..params.designated).collect();
    let weights = label_weights(params);
    let draws: Vec<PatientDraw> = (0..params.n_patients)
        .into_par_iter()
        .map(|i| draw_patient(i, params, &channels, &designated, &weights))
        .collect();

    let mut catalog: Vec<ChannelId> = channels.iter().map(|c| c.channel.clone()).collect();
    let mut records = Vec::with_capacity(draws.len());
    let mut patients = Vec::with_capacity(draws.len());
    let mut labels = BTreeMap::new();
    let mut table = BTreeMap::new();
    for d in draws {
        labels.insert(d.truth.patient_id.clone(), d.truth.label);
        if let Some(demo) = &d.record.demographics {
            table.insert(d.record.patient_id.clone(), demo.clone());
        }
        records.push(d.record);
        patients.push(d.truth);
    }
    catalog.sort();
    let mut cohort = Cohort { records, catalog };
    cohort.attach_demographics(&table)?;
    Ok(SyntheticCohort {
        cohort,
        labels,
        truth: GroundTruth {
            params: params.clone(),
            channels,
            designated,
            label_weights: weights,
            label_intercept: 0.0,
            patients,
        },
    })
}

/// `patient_id<TAB>0|1` per line.
pub fn write_labels<W: Write>(labels: &BTreeMap<String, bool>, mut w: W) -> Result<()> {
    for (pid, y) in labels {
        writeln!(w, "{pid}\t{}", u8::from(*y))?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_labels<R: BufRead>(reader: R) -> Result<BTreeMap<String, bool>> {
    let mut out = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: idx + 1, msg };
        let (pid, y) = line.split_once('\t').ok_or_else(|| parse_err("expected `patient_id<TAB>label`".into()))?;
        let y = match y.trim() {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(format!("label must be 0 or 1, got `{other}`"))),
        };
        if out.insert(pid.trim().to_string(), y).is_some() {
            return Err(parse_err(format!("duplicate patient `{pid}`")));
        }
    }
    Ok(out)
}
