//! Pipeline stages. Each reads upstream artifacts from the work dir, skips
//! itself when its manifest fingerprint is unchanged, and writes its outputs
//! atomically followed by a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use ehrsig_core::curves::{build_curveset, population_medians};
use ehrsig_core::diagram::{render_svg, signature_diagram};
use ehrsig_core::ehr::{self, Cohort, CohortManifest, PatientRecord, Span};
use ehrsig_core::eval::{
    auroc, bootstrap_pivot_ci, cross_entropy, delong_ci_logistic, delong_paired_test, ici, point_metrics,
    BootstrapOptions, MetricCI, PairedTest, PointMetrics, ScoredSet,
};
use ehrsig_core::explain::{
    global_importance, importance_distribution, linear_shap, root_cause_report, waterfall_data, ImportanceDistribution,
    RootCauseReport, Waterfall,
};
use ehrsig_core::ica::{fit_ica, IcaModel, IcaParams};
use ehrsig_core::sampler::{fit_standardizer, last_cross_sections, sample_cohort, Standardizer};
use ehrsig_core::supervised::{tune, LogisticModel, ParamSpace, Representation, TuneOptions, TuningReport};
use ehrsig_core::synth::{generate_cohort, parse_labels, write_labels};
use ehrsig_core::{matrix_io, seed};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{read_json, require, write_atomic, write_json, write_with, StageDir, StageKey};
use crate::config::{FeatureSet, ModelSpec, PipelineConfig, Seeds};
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Synth,
    Ingest,
    Curves,
    Sample,
    Ica,
    Train,
    Eval,
    Explain,
    Diagram,
    Pipeline,
}

/// Stages run by `pipeline`, in order.
pub const PIPELINE: [Stage; 8] =
    [Stage::Ingest, Stage::Curves, Stage::Sample, Stage::Ica, Stage::Train, Stage::Eval, Stage::Explain, Stage::Diagram];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Curves => "curves",
            Stage::Sample => "sample",
            Stage::Ica => "ica",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Explain => "explain",
            Stage::Diagram => "diagram",
            Stage::Pipeline => "pipeline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

pub struct Context {
    pub cfg: PipelineConfig,
    pub seeds: Seeds,
    pub work: PathBuf,
}

impl Context {
    pub fn new(cfg: PipelineConfig) -> Self {
        let seeds = cfg.seeds();
        let work = cfg.paths.work_dir.clone();
        Context { cfg, seeds, work }
    }

    fn dir(&self, stage: &str) -> StageDir {
        StageDir::new(&self.work, stage)
    }
}

/// Run one stage, or every pipeline stage in order.
pub fn run(stage: Stage, ctx: &Context) -> CliResult<Vec<(Stage, Outcome)>> {
    let stages: Vec<Stage> = if stage == Stage::Pipeline { PIPELINE.to_vec() } else { vec![stage] };
    let mut done = Vec::new();
    for s in stages {
        let outcome = run_one(s, ctx)?;
        log::info!("{}: {}", s.name(), if outcome == Outcome::Ran { "done" } else { "up to date" });
        done.push((s, outcome));
    }
    Ok(done)
}

fn run_one(stage: Stage, ctx: &Context) -> CliResult<Outcome> {
    match stage {
        Stage::Synth => synth(ctx),
        Stage::Ingest => ingest(ctx),
        Stage::Curves => curves(ctx),
        Stage::Sample => sample(ctx),
        Stage::Ica => ica(ctx),
        Stage::Train => train(ctx),
        Stage::Eval => eval(ctx),
        Stage::Explain => explain(ctx),
        Stage::Diagram => diagram(ctx),
        Stage::Pipeline => unreachable!("expanded by run"),
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config sections serialize")
}

fn open(path: &Path) -> CliResult<BufReader<fs::File>> {
    require(path)?;
    Ok(BufReader::new(fs::File::open(path).map_err(|e| CliError::io(path, e))?))
}

fn synth(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir("synth");
    let mut params = ctx.cfg.synth.params.clone();
    params.seed = ctx.seeds.synth;
    let key = StageKey::new("synth", to_json(&params)).seed("synth", params.seed);
    if dir.is_current(&key) {
        return Ok(Outcome::Skipped);
    }
    let syn = generate_cohort(&params)?;
    write_with(&dir.path("events.tsv"), |b| ehr::write_event_log(&syn.cohort, b))?;
    write_with(&dir.path("demographics.tsv"), |b| ehr::write_demographics(&syn.cohort, b))?;
    write_with(&dir.path("labels.tsv"), |b| write_labels(&syn.labels, b))?;
    write_json(&dir.path("truth.json"), &syn.truth)?;
    dir.finish(key, &["events.tsv", "demographics.tsv", "labels.tsv", "truth.json"])?;
    Ok(Outcome::Ran)
}

/// Learning-set split over labeled patients; unlabeled ones only feed discovery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub unlabeled: Vec<String>,
}

impl Split {
    /// Patients used for curve medians, standardization and ICA.
    pub fn discovery(&self) -> BTreeSet<&str> {
        self.train.iter().chain(&self.unlabeled).map(String::as_str).collect()
    }
}

/// Stratified split: each class is shuffled and its first
/// `round(fraction · size)` members go to the test set.
pub fn stratified_split(ids: &[String], labels: &BTreeMap<String, bool>, fraction: f64, seed: u64) -> CliResult<Split> {
    let mut split = Split { train: Vec::new(), test: Vec::new(), unlabeled: Vec::new() };
    let mut classes: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for id in ids {
        match labels.get(id) {
            Some(&y) => classes[y as usize].push(id.clone()),
            None => split.unlabeled.push(id.clone()),
        }
    }
    let mut rng = seed::rng(seed);
    for (c, members) in classes.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let n_test = (fraction * members.len() as f64).round() as usize;
        if n_test < 2 || members.len() - n_test < 2 {
            return Err(CliError::Other(format!(
                "class {c} has {} labeled patients; need at least two in each of train and test",
                members.len()
            )));
        }
        split.test.extend(members.drain(..n_test));
        split.train.append(members);
    }
    split.train.sort();
    split.test.sort();
    split.unlabeled.sort();
    Ok(split)
}

fn ingest(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir("ingest");
    let events = ctx.cfg.events_path();
    let demo = ctx.cfg.demographics_path();
    let labels = ctx.cfg.labels_path();
    let mut key = StageKey::new("ingest", json!({"filter": to_json(&ctx.cfg.filter), "split": ctx.cfg.split.test_fraction}))
        .seed("split", ctx.seeds.split)
        .input("events", &events)?;
    if let Some(p) = &demo {
        key = key.input("demographics", p)?;
    }
    let labels_path = labels.ok_or_else(|| CliError::Config {
        field: "paths.labels".into(),
        msg: "labels are required to split the learning set".into(),
    })?;
    key = key.input("labels", &labels_path)?;
    if dir.is_current(&key) {
        return Ok(Outcome::Skipped);
    }

    let mut cohort = ehr::parse_event_log(open(&events)?)?;
    if let Some(p) = &demo {
        cohort.attach_demographics(&ehr::parse_demographics(open(p)?)?)?;
    }
    let before = cohort.p();
    let cohort = ehr::filter_channels(&cohort, ctx.cfg.filter.min_total_events, ctx.cfg.filter.min_records);
    log::info!("ingest: {} records, {} of {before} channels kept", cohort.records.len(), cohort.p());
    let all_labels = parse_labels(open(&labels_path)?)?;
    let ids: Vec<String> = cohort.records.iter().map(|r| r.patient_id.clone()).collect();
    let known: BTreeSet<&String> = ids.iter().collect();
    let labels: BTreeMap<String, bool> =
        all_labels.iter().filter(|(id, _)| known.contains(id)).map(|(k, v)| (k.clone(), *v)).collect();
    if labels.len() < all_labels.len() {
        log::warn!("ingest: {} labels name patients without events", all_labels.len() - labels.len());
    }
    let split = stratified_split(&ids, &labels, ctx.cfg.split.test_fraction, ctx.seeds.split)?;

    write_with(&dir.path("events.tsv"), |b| ehr::write_event_log(&cohort, b))?;
    let mut outputs = vec!["events.tsv", "cohort.json", "labels.tsv", "split.json"];
    if demo.is_some() {
        write_with(&dir.path("demographics.tsv"), |b| ehr::write_demographics(&cohort, b))?;
        outputs.push("demographics.tsv");
    }
    write_json(&dir.path("cohort.json"), &cohort.manifest())?;
    write_with(&dir.path("labels.tsv"), |b| write_labels(&labels, b))?;
    write_json(&dir.path("split.json"), &split)?;
    dir.finish(key, &outputs)?;
    Ok(Outcome::Ran)
}

/// Ingested cohort with the labels and split written next to it.
struct Ingested {
    cohort: Cohort,
    labels: BTreeMap<String, bool>,
    split: Split,
}

impl Ingested {
    fn subset(&self, ids: &BTreeSet<&str>) -> Cohort {
        Cohort {
            records: self.cohort.records.iter().filter(|r| ids.contains(r.patient_id.as_str())).cloned().collect(),
            catalog: self.cohort.catalog.clone(),
        }
    }

    fn ids<'a>(list: &'a [String]) -> BTreeSet<&'a str> {
        list.iter().map(String::as_str).collect()
    }
}

fn ingest_inputs(ctx: &Context, key: StageKey) -> CliResult<StageKey> {
    let dir = ctx.dir("ingest");
    let mut key = key
        .input("events", &dir.path("events.tsv"))?
        .input("cohort", &dir.path("cohort.json"))?
        .input("labels", &dir.path("labels.tsv"))?
        .input("split", &dir.path("split.json"))?;
    if dir.path("demographics.tsv").is_file() {
        key = key.input("demographics", &dir.path("demographics.tsv"))?;
    }
    Ok(key)
}

/// Reload the ingested cohort. Spans and the catalog come from the cohort
/// manifest, since filtering may have removed the events that set them.
fn load_ingested(ctx: &Context) -> CliResult<Ingested> {
    let dir = ctx.dir("ingest");
    let manifest: CohortManifest = read_json(&dir.path("cohort.json"))?;
    let parsed = ehr::parse_event_log(open(&dir.path("events.tsv"))?)?;
    let mut by_id: BTreeMap<String, PatientRecord> =
        parsed.records.into_iter().map(|r| (r.patient_id.clone(), r)).collect();
    let mut records = Vec::with_capacity(manifest.records.len());
    for rs in &manifest.records {
        let span = Span::new(rs.first_day, rs.last_day)?;
        let mut rec = by_id.remove(&rs.patient_id).unwrap_or_else(|| PatientRecord {
            patient_id: rs.patient_id.clone(),
            span,
            code_events: Vec::new(),
            measurements: Vec::new(),
            visits: Vec::new(),
            demographics: None,
        });
        rec.span = span;
        records.push(rec);
    }
    let mut cohort = Cohort { records, catalog: manifest.catalog.clone() };
    let demo = dir.path("demographics.tsv");
    if demo.is_file() {
        cohort.attach_demographics(&ehr::parse_demographics(open(&demo)?)?)?;
    }
    if cohort.catalog != manifest.catalog {
        return Err(CliError::Other("ingested catalog does not match cohort.json".into()));
    }
    let labels = parse_labels(open(&dir.path("labels.tsv"))?)?;
    let split: Split = read_json(&dir.path("split.json"))?;
    Ok(Ingested { cohort, labels, split })
}

fn curves(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir("curves");
    let key = ingest_inputs(ctx, StageKey::new("curves", to_json(&ctx.cfg.curves)))?.seed("curves", ctx.seeds.curves);
    if dir.is_current(&key) {
        return Ok(Outcome::Skipped);
    }
    let data = load_ingested(ctx)?;
    let discovery = data.subset(&data.split.discovery());
    let medians = population_medians(&discovery);
    write_json(&dir.path("medians.json"), &medians)?;
    let mut outputs = vec!["medians.json".to_string()];
    for pid in &ctx.cfg.curves.export {
        let rec = data.cohort.record(pid).ok_or_else(|| CliError::Config {
            field: "curves.export".into(),
            msg: format!("patient `{pid}` is not in the ingested cohort"),
        })?;
        let cs = build_curveset(rec, &data.cohort.catalog, &medians, &ctx.cfg.curves.params, ctx.seeds.curves)?;
        let name = format!("curves_{pid}.csv");
        write_with(&dir.path(&name), |b| cs.write_csv(b))?;
        outputs.push(name);
    }
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    dir.finish(key, &names)?;
    Ok(Outcome::Ran)
}

fn load_medians(ctx: &Context) -> CliResult<BTreeMap<String, f64>> {
    read_json(&ctx.dir("curves").path("medians.json"))
}

fn sample(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir("sample");
    let curves = ctx.dir("curves");
    let key = ingest_inputs(ctx, StageKey::new("sample", json!({"curves": to_json(&ctx.cfg.curves.params), "density": ctx.cfg.sampler.density})))?
        .input("medians", &curves.path("medians.json"))?
        .seed("curves", ctx.seeds.curves)
        .seed("sampler", ctx.seeds.sampler);
    if dir.is_current(&key) {
        return Ok(Outcome::Skipped);
    }
    let data = load_ingested(ctx)?;
    let medians = load_medians(ctx)?;
    let discovery = data.subset(&data.split.discovery());
    let x = sample_cohort(
        &discovery,
        &medians,
        &ctx.cfg.curves.params,
        ctx.seeds.curves,
        ctx.cfg.sampler.density,
        ctx.seeds.sampler,
    )?;
    log::info!("sample: {} cross-sections over {} channels", x.n(), x.p());
    let standardizer = fit_standardizer(&x)?;
    write_with(&dir.path("cross_sections.bin"), |b| matrix_io::write_matrices(b, &[("x", &x.data)]))?;
    write_json(&dir.path("cross_sections.json"), &x.sidecar())?;
    write_json(&dir.path("standardizer.json"), &standardizer)?;
    dir.finish(key, &["cross_sections.bin", "cross_sections.json", "standardizer.json"])?;
    Ok(Outcome::Ran)
}

fn load_cross_sections(ctx: &Context) -> CliResult<(DMatrix<f64>, Standardizer)> {
    let dir = ctx.dir("sample");
    let path = dir.path("cross_sections.bin");
    require(&path)?;
    let mut entries = matrix_io::load(&path)?;
    let x = matrix_io::take(&mut entries, "x")?;
    let standardizer: Standardizer = read_json(&dir.path("standardizer.json"))?;
    Ok((x, standardizer))
}

fn ica(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir("ica");
    let sample = ctx.dir("sample");
    let c = &ctx.cfg.ica;
    let params = IcaParams { k: c.k, seed: ctx.seeds.ica, tol: c.tol, max_iter: c.max_iter };
    let key = StageKey::new("ica", to_json(&params))
        .seed("ica", ctx.seeds.ica)
        .input("cross_sections", &sample.path("cross_sections.bin"))?
        .input("standardizer", &sample.path("standardizer.json"))?;
    if dir.is_current(&key) {
        return Ok(Outcome::Skipped);
    }
    let (x, standardizer) = load_cross_sections(ctx)?;
    let model = fit_ica(&standardizer.apply(&x)?, &params)?;
    if !model.meta.converged {
        log::warn!("ica: stopped at the iteration cap (change {:.3e})", model.meta.final_change);
    }
    let means = DMatrix::from_column_slice(model.p(), 1, model.row_means.as_slice());
    write_with(&dir.path("model.bin"), |b| {
        matrix_io::write_matrices(b, &[("mixing", &model.mixing), ("unmixing", &model.unmixing), ("row_means", &means)])
    })?;
    write_json(&dir.path("model.json"), &model.meta)?;
    dir.finish(key, &["model.bin", "model.json"])?;
    Ok(Outcome::Ran)
}

fn load_ica(ctx: &Context) -> CliResult<IcaModel> {
    let dir = ctx.dir("ica");
    require(&dir.path("model.bin"))?;
    require(&dir.path("model.json"))?;
    Ok(IcaModel::load(&dir.path("model.bin"), &dir.path("model.json"))?)
}

/// Feature ids and patient order of the learning-set matrices.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeatureIndex {
    train_ids: Vec<String>,
    test_ids: Vec<String>,
    channels: Vec<String>,
    signatures: Vec<String>,
}

/// Learning-set features: rows are patients.
struct Features {
    index: FeatureIndex,
    matrices: BTreeMap<String, DMatrix<f64>>,
    y_train: Vec<bool>,
    y_test: Vec<bool>,
}

impl Features {
    fn get(&self, set: FeatureSet, part: &str) -> &DMatrix<f64> {
        &self.matrices[&format!("{part}_{}", set.as_str())]
    }

    fn ids(&self, set: FeatureSet) -> &[String] {
        match set {
            FeatureSet::Channels => &self.index.channels,
            FeatureSet::Signatures => &self.index.signatures,
        }
    }
}

fn load_features(ctx: &Context) -> CliResult<Features> {
    let dir = ctx.dir("train");
    let path = dir.path("features.bin");
    require(&path)?;
    let matrices = matrix_io::load(&path)?.into_iter().collect();
    let index: FeatureIndex = read_json(&dir.path("features.json"))?;
    let labels = parse_labels(open(&ctx.dir("ingest").path("labels.tsv"))?)?;
    let lookup = |ids: &[String]| -> CliResult<Vec<bool>> {
        ids.iter()
            .map(|id| labels.get(id).copied().ok_or_else(|| CliError::Other(format!("no label for `{id}`"))))
            .collect()
    };
    Ok(Features { y_train: lookup(&index.train_ids)?, y_test: lookup(&index.test_ids)?, index, matrices })
}

fn model_file(spec: &ModelSpec) -> String {
    format!("model_{}.json", spec.name())
}

fn tune_options(ctx: &Context, spec: &ModelSpec) -> TuneOptions {
    let t = &ctx.cfg.tuning;
    TuneOptions {
        family: spec.family,
        budget: t.budget,
        alpha_filter: t.alpha_filter,
        b_oob: t.b_oob,
        folds: t.folds,
        seed: seed::derive(ctx.seeds.tuning, &spec.name()),
        space: ParamSpace { lambda1: t.lambda1, lambda2: t.lambda2, gamma: t.gamma, screen_size: t.screen_size },
    }
}

fn train(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir("train");
    let key = ingest_inputs(ctx, StageKey::new("train", json!({"tuning": to_json(&ctx.cfg.tuning), "curves": to_json(&ctx.cfg.curves.params)})))?
        .input("medians", &ctx.dir("curves").path("medians.json"))?
        .input("standardizer", &ctx.dir("sample").path("standardizer.json"))?
        .input("ica_model", &ctx.dir("ica").path("model.bin"))?
        .seed("curves", ctx.seeds.curves)
        .seed("tuning", ctx.seeds.tuning);
    if dir.is_current(&key) {
        return Ok(Outcome::Skipped);
    }
    let data = load_ingested(ctx)?;
    let medians = load_medians(ctx)?;
    let (_, standardizer) = load_cross_sections(ctx)?;
    let model = load_ica(ctx)?;

    // Last available cross-section of every learning-set record, standardized
    // with the discovery standardizer and projected onto the sources.
    let mut matrices: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();
    for (part, ids) in [("train", &data.split.train), ("test", &data.split.test)] {
        let last = last_cross_sections(&data.subset(&Ingested::ids(ids)), &medians, &ctx.cfg.curves.params, ctx.seeds.curves)?;
        let z = standardizer.apply(&last.data)?;
        let s = model.source_matrix(&z)?;
        matrices.insert(format!("{part}_channels"), z.transpose());
        matrices.insert(format!("{part}_signatures"), s.transpose());
    }
    let index = FeatureIndex {
        train_ids: data.split.train.clone(),
        test_ids: data.split.test.clone(),
        channels: data.cohort.catalog.iter().map(|c| c.to_string()).collect(),
        signatures: (0..model.k()).map(|i| format!("source_{i}")).collect(),
    };
    let entries: Vec<(&str, &DMatrix<f64>)> = matrices.iter().map(|(k, v)| (k.as_str(), v)).collect();
    write_with(&dir.path("features.bin"), |b| matrix_io::write_matrices(b, &entries))?;
    write_json(&dir.path("features.json"), &index)?;

    let y_train: Vec<bool> = data.split.train.iter().map(|id| data.labels[id]).collect();
    let mut outputs = vec!["features.bin".to_string(), "features.json".to_string()];
    for spec in &ctx.cfg.tuning.models {
        let (set, rep) = match spec.representation {
            FeatureSet::Channels => (&index.channels, Representation::Channels),
            FeatureSet::Signatures => (&index.signatures, Representation::Signatures),
        };
        let x = &matrices[&format!("train_{}", spec.representation.as_str())];
        log::info!("train: tuning {} on {} x {}", spec.name(), x.nrows(), x.ncols());
        let (report, fitted) = tune(x, &y_train, &tune_options(ctx, spec))?;
        let fitted = fitted.with_features(set.clone(), rep)?;
        log::info!(
            "train: {} winner trial {} of {} comparable, training AUROC {:.4}",
            spec.name(),
            report.winner,
            report.comparable.len(),
            report.final_training_auroc.point
        );
        let model_name = model_file(spec);
        let report_name = format!("tuning_{}.json", spec.name());
        write_json(&dir.path(&model_name), &fitted)?;
        write_json(&dir.path(&report_name), &report)?;
        outputs.push(model_name);
        outputs.push(report_name);
    }
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    dir.finish(key, &names)?;
    Ok(Outcome::Ran)
}

fn train_inputs(ctx: &Context, mut key: StageKey) -> CliResult<StageKey> {
    let dir = ctx.dir("train");
    key = key
        .input("features", &dir.path("features.bin"))?
        .input("feature_index", &dir.path("features.json"))?
        .input("labels", &ctx.dir("ingest").path("labels.tsv"))?;
    for spec in &ctx.cfg.tuning.models {
        key = key.input(&spec.name(), &dir.path(&model_file(spec)))?;
    }
    Ok(key)
}

fn load_models(ctx: &Context) -> CliResult<Vec<(ModelSpec, LogisticModel)>> {
    let dir = ctx.dir("train");
    ctx.cfg
        .tuning
        .models
        .iter()
        .map(|spec| Ok((spec.clone(), read_json(&dir.path(&model_file(spec)))?)))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model: String,
    pub representation: FeatureSet,
    pub n_test: usize,
    pub n_positive: usize,
    pub auroc_delong: MetricCI,
    pub auroc_bootstrap: MetricCI,
    pub ici: f64,
    pub cross_entropy: MetricCI,
    pub point_metrics: Vec<PointMetrics>,
    pub training_auroc: MetricCI,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: String,
    pub b: String,
    pub test: PairedTest,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: Vec<ModelEvaluation>,
    pub comparisons: Vec<PairwiseComparison>,
    /// `p_values[i][j]`: paired DeLong p-value between models i and j.
    pub p_values: Vec<Vec<f64>>,
}

fn eval(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir("eval");
    let key = train_inputs(ctx, StageKey::new("eval", to_json(&ctx.cfg.eval)))?.seed("eval", ctx.seeds.eval);
    if dir.is_current(&key) {
        return Ok(Outcome::Skipped);
    }
    let features = load_features(ctx)?;
    let models = load_models(ctx)?;
    let c = &ctx.cfg.eval;
    let mut scored_sets = Vec::new();
    let mut evaluations = Vec::new();
    let mut outputs = vec!["report.json".to_string()];
    for (spec, model) in &models {
        let name = spec.name();
        let probs = model.predict_rows(features.get(spec.representation, "test"))?;
        let scored = ScoredSet::new(probs.clone(), features.y_test.clone())?;
        let boot = |label: &str, domain: (f64, f64)| BootstrapOptions {
            replicates: c.bootstrap,
            level: c.level,
            seed: seed::derive(ctx.seeds.eval, &format!("{name}/{label}")),
            domain,
            needs_both_classes: true,
        };
        let auroc_bootstrap = bootstrap_pivot_ci(auroc, &scored, &boot("auroc", (0.0, 1.0)))?;
        let ce = bootstrap_pivot_ci(
            |s: &ScoredSet| Ok(cross_entropy(&s.scores, &s.labels)),
            &scored,
            &boot("cross_entropy", (0.0, f64::INFINITY)),
        )?;
        let report: TuningReport = read_json(&ctx.dir("train").path(&format!("tuning_{name}.json")))?;
        evaluations.push(ModelEvaluation {
            model: name.clone(),
            representation: spec.representation,
            n_test: scored.len(),
            n_positive: scored.n_positive(),
            auroc_delong: delong_ci_logistic(&scored, c.level)?,
            auroc_bootstrap,
            ici: ici(&probs, &features.y_test)?,
            cross_entropy: ce,
            point_metrics: c.thresholds.iter().map(|&t| point_metrics(&scored, t)).collect(),
            training_auroc: report.final_training_auroc,
        });
        let scores_name = format!("scores_{name}.tsv");
        let mut text = String::from("patient_id\tlabel\tprobability\n");
        for ((id, y), p) in features.index.test_ids.iter().zip(&features.y_test).zip(&probs) {
            text.push_str(&format!("{id}\t{}\t{p}\n", *y as u8));
        }
        write_atomic(&dir.path(&scores_name), text.as_bytes())?;
        outputs.push(scores_name);
        scored_sets.push(scored);
    }
    let m = models.len();
    let mut p_values = vec![vec![1.0; m]; m];
    let mut comparisons = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let test = delong_paired_test(&scored_sets[i], &scored_sets[j])?;
            p_values[i][j] = test.p_value;
            p_values[j][i] = test.p_value;
            comparisons.push(PairwiseComparison { a: models[i].0.name(), b: models[j].0.name(), test });
        }
    }
    write_json(&dir.path("report.json"), &EvalReport { models: evaluations, comparisons, p_values })?;
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    dir.finish(key, &names)?;
    Ok(Outcome::Ran)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordExplanation {
    pub patient_id: String,
    pub probability: f64,
    pub label: bool,
    pub root_causes: RootCauseReport,
    pub waterfall: Waterfall,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainReport {
    pub model: String,
    pub feature_ids: Vec<String>,
    pub background_means: Vec<f64>,
    pub global_importance: Vec<f64>,
    pub distribution: ImportanceDistribution,
    pub records: Vec<RecordExplanation>,
}

fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.ncols()).map(|j| x.column(j).mean()).collect()
}

fn explain(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir("explain");
    let train_dir = ctx.dir("train");
    let mut key = train_inputs(ctx, StageKey::new("explain", to_json(&ctx.cfg.explain)))?.seed("explain", ctx.seeds.explain);
    for spec in &ctx.cfg.tuning.models {
        key = key.input(&format!("tuning_{}", spec.name()), &train_dir.path(&format!("tuning_{}.json", spec.name())))?;
    }
    if dir.is_current(&key) {
        return Ok(Outcome::Skipped);
    }
    let features = load_features(ctx)?;
    let c = &ctx.cfg.explain;
    let mut outputs = Vec::new();
    for (spec, model) in load_models(ctx)? {
        let name = spec.name();
        let report: TuningReport = read_json(&train_dir.path(&format!("tuning_{name}.json")))?;
        let x_train = features.get(spec.representation, "train");
        let x_test = features.get(spec.representation, "test");
        let mu = column_means(x_train);
        let ids = features.ids(spec.representation).to_vec();
        let rep = match spec.representation {
            FeatureSet::Channels => Representation::Channels,
            FeatureSet::Signatures => Representation::Signatures,
        };
        let params = report.winner_params.clone();
        let refit = |x: &DMatrix<f64>, y: &[bool]| params.fit(x, y)?.with_features(ids.clone(), rep);
        let distribution = importance_distribution(
            refit,
            x_train,
            &features.y_train,
            x_test,
            &mu,
            c.bootstrap,
            seed::derive(ctx.seeds.explain, &name),
        )?;
        let probs = model.predict_rows(x_test)?;
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut records = Vec::new();
        for &i in order.iter().take(c.records) {
            let row: Vec<f64> = x_test.row(i).iter().copied().collect();
            let expl = linear_shap(&model, &row, &mu)?;
            records.push(RecordExplanation {
                patient_id: features.index.test_ids[i].clone(),
                probability: probs[i],
                label: features.y_test[i],
                root_causes: root_cause_report(&expl, &model.weights, c.tau_inert)?,
                waterfall: waterfall_data(&expl, c.top_m)?,
            });
        }
        let out = ExplainReport {
            model: name.clone(),
            feature_ids: ids.clone(),
            global_importance: global_importance(&model, x_test, &mu)?,
            background_means: mu,
            distribution,
            records,
        };
        let file = format!("{name}.json");
        write_json(&dir.path(&file), &out)?;
        outputs.push(file);
    }
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    dir.finish(key, &names)?;
    Ok(Outcome::Ran)
}

fn diagram(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir("diagram");
    let sample = ctx.dir("sample");
    let key = StageKey::new("diagram", to_json(&ctx.cfg.diagram))
        .input("cross_sections", &sample.path("cross_sections.bin"))?
        .input("standardizer", &sample.path("standardizer.json"))?
        .input("ica_model", &ctx.dir("ica").path("model.bin"))?;
    if dir.is_current(&key) {
        return Ok(Outcome::Skipped);
    }
    let (x, standardizer) = load_cross_sections(ctx)?;
    let model = load_ica(ctx)?;
    let sources = model.source_matrix(&standardizer.apply(&x)?)?;
    let mut outputs = Vec::new();
    let width = (model.k().saturating_sub(1)).to_string().len();
    for i in 0..model.k() {
        let row: Vec<f64> = sources.row(i).iter().copied().collect();
        let d = signature_diagram(&model, &standardizer, &row, i, ctx.cfg.diagram.top_m)?;
        let stem = format!("signature_{i:0width$}");
        write_json(&dir.path(&format!("{stem}.json")), &d)?;
        outputs.push(format!("{stem}.json"));
        if ctx.cfg.diagram.svg {
            write_atomic(&dir.path(&format!("{stem}.svg")), render_svg(&d, ctx.cfg.diagram.display_cutoff).as_bytes())?;
            outputs.push(format!("{stem}.svg"));
        }
    }
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    dir.finish(key, &names)?;
    Ok(Outcome::Ran)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let ids: Vec<String> = (0..40).map(|i| format!("P{i:02}")).collect();
        let labels: BTreeMap<String, bool> = ids.iter().take(30).enumerate().map(|(i, id)| (id.clone(), i % 3 == 0)).collect();
        let s = stratified_split(&ids, &labels, 0.3, 5).unwrap();
        assert_eq!(s.unlabeled.len(), 10);
        assert_eq!(s.train.len() + s.test.len(), 30);
        assert_eq!(s.test.iter().filter(|id| labels[*id]).count(), 3);
        assert!(s.train.iter().all(|id| !s.test.contains(id)));
        assert_eq!(s, stratified_split(&ids, &labels, 0.3, 5).unwrap());
    }

    #[test]
    fn split_rejects_tiny_class() {
        let ids: Vec<String> = (0..10).map(|i| format!("P{i}")).collect();
        let labels: BTreeMap<String, bool> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i == 0)).collect();
        assert!(stratified_split(&ids, &labels, 0.3, 1).is_err());
    }
}
