//! Pipeline configuration: TOML file, flag overrides and validation.

use std::path::{Path, PathBuf};

use ehrsig_core::curves::CurveParams;
use ehrsig_core::seed;
use ehrsig_core::supervised::ModelFamily;
use ehrsig_core::synth::SynthParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Base seed; every section seed left unset is derived from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub filter: FilterConfig,
    pub split: SplitConfig,
    pub curves: CurvesConfig,
    pub sampler: SamplerConfig,
    pub ica: IcaConfig,
    pub tuning: TuningConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
    pub diagram: DiagramConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Event log; defaults to the synth stage's output in the work dir.
    pub events: Option<PathBuf>,
    pub demographics: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { events: None, demographics: None, labels: None, work_dir: PathBuf::from("work") }
    }
}

// Flattened sections cannot deny unknown fields through serde; their keys
// are checked in `PipelineConfig::parse`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub params: SynthParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_total_events: usize,
    pub min_records: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { min_total_events: 1000, min_records: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_fraction: 0.3, seed: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurvesConfig {
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub params: CurveParams,
    /// Patients whose full curvesets are exported as CSV.
    pub export: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Cross-sections per record-year.
    pub density: f64,
    pub seed: Option<u64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { density: 1.0, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcaConfig {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: Option<u64>,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig { k: 50, tol: 1e-4, max_iter: 1000, seed: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Channels,
    Signatures,
}

impl FeatureSet {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSet::Channels => "channels",
            FeatureSet::Signatures => "signatures",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub representation: FeatureSet,
    pub family: ModelFamily,
}

impl ModelSpec {
    pub fn name(&self) -> String {
        let family = match self.family {
            ModelFamily::Enet => "enet",
            ModelFamily::Adanet => "adanet",
        };
        format!("{}_{family}", self.representation.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub models: Vec<ModelSpec>,
    pub budget: usize,
    pub alpha_filter: f64,
    pub b_oob: usize,
    pub folds: usize,
    pub lambda1: (f64, f64),
    pub lambda2: (f64, f64),
    pub gamma: f64,
    pub screen_size: Option<usize>,
    pub seed: Option<u64>,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            models: vec![
                ModelSpec { representation: FeatureSet::Signatures, family: ModelFamily::Enet },
                ModelSpec { representation: FeatureSet::Channels, family: ModelFamily::Enet },
            ],
            budget: 200,
            alpha_filter: 0.2,
            b_oob: 100,
            folds: 10,
            lambda1: (1e-4, 0.2),
            lambda2: (1e-4, 1.0),
            gamma: 1.0,
            screen_size: None,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap: usize,
    pub level: f64,
    pub thresholds: Vec<f64>,
    pub seed: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { bootstrap: 1000, level: 0.95, thresholds: vec![0.5], seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub bootstrap: usize,
    pub tau_inert: f64,
    /// Highest-scoring test records given root-cause reports and waterfalls.
    pub records: usize,
    pub top_m: usize,
    pub seed: Option<u64>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { bootstrap: 500, tau_inert: 0.0, records: 5, top_m: 10, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagramConfig {
    pub top_m: usize,
    /// Bars with |normalized change| below this are left out of the SVG.
    pub display_cutoff: f64,
    pub svg: bool,
}

impl Default for DiagramConfig {
    fn default() -> Self {
        DiagramConfig { top_m: 10, display_cutoff: 0.0, svg: true }
    }
}

/// Resolved per-stage seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Seeds {
    pub synth: u64,
    pub split: u64,
    pub curves: u64,
    pub sampler: u64,
    pub ica: u64,
    pub tuning: u64,
    pub eval: u64,
    pub explain: u64,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn bad(path: &str, msg: impl Into<String>) -> CliError {
    CliError::Config { field: path.to_string(), msg: msg.into() }
}

fn check_range(path: &str, v: (f64, f64)) -> Result<(), CliError> {
    if !(v.0 > 0.0 && v.1 >= v.0 && v.1.is_finite()) {
        return Err(bad(path, format!("expected 0 < low <= high, got {v:?}")));
    }
    Ok(())
}

fn check_level(path: &str, v: f64) -> Result<(), CliError> {
    if !(v > 0.0 && v < 1.0) {
        return Err(bad(path, format!("must lie in (0, 1), got {v}")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| locate(text, s.start)).unwrap_or_default();
            bad(&field, e.message().to_string())
        })?;
        let table: toml::Table = toml::from_str(text).map_err(|e| bad("", e.to_string()))?;
        check_keys(&table, "synth", &cfg.synth)?;
        check_keys(&table, "curves", &cfg.curves)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.paths.work_dir = out.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.params.validate().map_err(|e| section_error("synth", &self.synth, e))?;
        self.curves.params.validate().map_err(|e| section_error("curves", &self.curves, e))?;
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(bad("split.test_fraction", "must lie in (0, 1)"));
        }
        if !(self.sampler.density > 0.0 && self.sampler.density.is_finite()) {
            return Err(bad("sampler.density", "must be positive"));
        }
        if self.ica.k == 0 {
            return Err(bad("ica.k", "must be at least 1"));
        }
        if !(self.ica.tol > 0.0) {
            return Err(bad("ica.tol", "must be positive"));
        }
        if self.ica.max_iter == 0 {
            return Err(bad("ica.max_iter", "must be at least 1"));
        }
        let t = &self.tuning;
        if t.models.is_empty() {
            return Err(bad("tuning.models", "at least one model is required"));
        }
        for (i, m) in t.models.iter().enumerate() {
            if t.models[..i].contains(m) {
                return Err(bad(&format!("tuning.models[{i}]"), format!("duplicate model `{}`", m.name())));
            }
        }
        if t.budget == 0 {
            return Err(bad("tuning.budget", "must be at least 1"));
        }
        check_level("tuning.alpha_filter", t.alpha_filter)?;
        if t.b_oob == 0 {
            return Err(bad("tuning.b_oob", "must be at least 1"));
        }
        if t.folds < 2 {
            return Err(bad("tuning.folds", "must be at least 2"));
        }
        check_range("tuning.lambda1", t.lambda1)?;
        check_range("tuning.lambda2", t.lambda2)?;
        if !(t.gamma >= 0.0 && t.gamma.is_finite()) {
            return Err(bad("tuning.gamma", "must be non-negative"));
        }
        if t.screen_size == Some(0) {
            return Err(bad("tuning.screen_size", "must be at least 1"));
        }
        if self.eval.bootstrap < 100 {
            return Err(bad("eval.bootstrap", "must be at least 100"));
        }
        check_level("eval.level", self.eval.level)?;
        for (i, th) in self.eval.thresholds.iter().enumerate() {
            if !th.is_finite() {
                return Err(bad(&format!("eval.thresholds[{i}]"), "must be finite"));
            }
        }
        if self.explain.bootstrap < 10 {
            return Err(bad("explain.bootstrap", "must be at least 10"));
        }
        if !(self.explain.tau_inert >= 0.0) {
            return Err(bad("explain.tau_inert", "must be non-negative"));
        }
        if self.explain.top_m == 0 {
            return Err(bad("explain.top_m", "must be at least 1"));
        }
        if self.diagram.top_m == 0 {
            return Err(bad("diagram.top_m", "must be at least 1"));
        }
        if !(self.diagram.display_cutoff >= 0.0) {
            return Err(bad("diagram.display_cutoff", "must be non-negative"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let pick = |own: Option<u64>, label: &str| own.unwrap_or_else(|| seed::derive(self.seed, label));
        Seeds {
            synth: pick(self.synth.seed, "synth"),
            split: pick(self.split.seed, "split"),
            curves: pick(self.curves.seed, "curves"),
            sampler: pick(self.sampler.seed, "sampler"),
            ica: pick(self.ica.seed, "ica"),
            tuning: pick(self.tuning.seed, "tuning"),
            eval: pick(self.eval.seed, "eval"),
            explain: pick(self.explain.seed, "explain"),
        }
    }

    pub fn events_path(&self) -> PathBuf {
        self.paths.events.clone().unwrap_or_else(|| self.paths.work_dir.join("synth").join("events.tsv"))
    }

    pub fn demographics_path(&self) -> Option<PathBuf> {
        match (&self.paths.demographics, &self.paths.events) {
            (Some(p), _) => Some(p.clone()),
            (None, None) => Some(self.paths.work_dir.join("synth").join("demographics.tsv")),
            (None, Some(_)) => None,
        }
    }

    pub fn labels_path(&self) -> Option<PathBuf> {
        match (&self.paths.labels, &self.paths.events) {
            (Some(p), _) => Some(p.clone()),
            (None, None) => Some(self.paths.work_dir.join("synth").join("labels.tsv")),
            (None, Some(_)) => None,
        }
    }
}

fn known_keys<T: Serialize>(section: &T) -> Vec<String> {
    match serde_json::to_value(section) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn check_keys<T: Serialize>(table: &toml::Table, name: &str, section: &T) -> Result<(), CliError> {
    let Some(toml::Value::Table(given)) = table.get(name) else {
        return Ok(());
    };
    let mut known = known_keys(section);
    known.push("seed".into());
    match given.keys().find(|k| !known.contains(k)) {
        Some(k) => Err(bad(&format!("{name}.{k}"), "unknown field")),
        None => Ok(()),
    }
}

/// Core validation messages lead with the offending parameter's name.
fn section_error<T: Serialize>(name: &str, section: &T, err: ehrsig_core::Error) -> CliError {
    let msg = match err {
        ehrsig_core::Error::InvalidInput(m) => m,
        other => other.to_string(),
    };
    let lead = msg.split_whitespace().next().unwrap_or("").split('.').next().unwrap_or("");
    let field = if known_keys(section).iter().any(|k| k == lead) { format!("{name}.{lead}") } else { name.to_string() };
    bad(&field, msg)
}

/// Dotted key path of the table entry enclosing byte offset `pos`.
fn locate(text: &str, pos: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if offset > pos {
            break;
        }
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            table = name.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}
