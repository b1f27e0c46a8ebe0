//! Event-log data model, ingestion and channel filtering.
//!
//! The event log is line-delimited, tab-separated:
//!
//! ```text
//! patient_id <TAB> kind <TAB> channel <TAB> day [<TAB> value]
//! ```
//!
//! `kind` is one of `code`, `measurement`, `medication` or `visit`. A value
//! is required for measurements and forbidden otherwise. Medication lines
//! carry the visit day, one line per drug noted at that visit. A `visit`
//! line (channel `-`) records a visit whose medication list did not contain
//! any drug, which is what lets the medication curves detect stopping.
//! Blank lines and lines starting with `#` are ignored.
//!
//! Demographics live in a separate table:
//!
//! ```text
//! patient_id <TAB> sex(F|M) <TAB> races(comma separated, or -) <TAB> birth_day
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SEX_CHANNEL: &str = "sex";
pub const AGE_CHANNEL: &str = "age";
pub const RACE_PREFIX: &str = "race:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Code,
    Measurement,
    Medication,
    Demographic,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Code => "code",
            ChannelKind::Measurement => "measurement",
            ChannelKind::Medication => "medication",
            ChannelKind::Demographic => "demographic",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "code" => Ok(ChannelKind::Code),
            "measurement" => Ok(ChannelKind::Measurement),
            "medication" => Ok(ChannelKind::Medication),
            "demographic" => Ok(ChannelKind::Demographic),
            other => Err(Error::invalid(format!("unknown channel kind `{other}`"))),
        }
    }
}

/// A channel: one observed clinical variable. Ordered by kind, then name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelId {
    pub kind: ChannelKind,
    pub name: String,
}

impl ChannelId {
    pub fn new(kind: ChannelKind, name: impl Into<String>) -> Self {
        ChannelId { kind, name: name.into() }
    }

    /// Binary channels are left untouched by standardization.
    pub fn is_binary(&self) -> bool {
        match self.kind {
            ChannelKind::Medication => true,
            ChannelKind::Demographic => self.name != AGE_CHANNEL,
            _ => false,
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind, self.name)
    }
}

/// Inclusive day range covered by a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub first_day: i64,
    pub last_day: i64,
}

impl Span {
    pub fn new(first_day: i64, last_day: i64) -> Result<Self> {
        if first_day > last_day {
            return Err(Error::invalid(format!("span [{first_day}, {last_day}] is reversed")));
        }
        Ok(Span { first_day, last_day })
    }

    /// Number of days, τ.
    pub fn len(&self) -> usize {
        (self.last_day - self.first_day + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn years(&self) -> f64 {
        self.len() as f64 / 365.25
    }

    pub fn contains(&self, day: i64) -> bool {
        day >= self.first_day && day <= self.last_day
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub female: bool,
    pub races: BTreeSet<String>,
    pub birth_day: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeEvent {
    pub channel: String,
    pub day: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub channel: String,
    pub day: i64,
    pub value: f64,
}

/// A visit and the medications noted on its medication list.
#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub day: i64,
    pub medications: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub span: Span,
    pub code_events: Vec<CodeEvent>,
    pub measurements: Vec<Measurement>,
    /// Sorted by day, one entry per distinct visit day.
    pub visits: Vec<Visit>,
    pub demographics: Option<Demographics>,
}

impl PatientRecord {
    pub fn code_days(&self, channel: &str) -> Vec<i64> {
        self.code_events.iter().filter(|e| e.channel == channel).map(|e| e.day).collect()
    }

    pub fn measurement_points(&self, channel: &str) -> Vec<(i64, f64)> {
        self.measurements
            .iter()
            .filter(|m| m.channel == channel)
            .map(|m| (m.day, m.value))
            .collect()
    }

    pub fn visit_days(&self) -> Vec<i64> {
        self.visits.iter().map(|v| v.day).collect()
    }

    pub fn medication_days(&self, channel: &str) -> Vec<i64> {
        self.visits
            .iter()
            .filter(|v| v.medications.contains(channel))
            .map(|v| v.day)
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cohort {
    /// Sorted by patient id.
    pub records: Vec<PatientRecord>,
    /// Sorted by (kind, name); p entries.
    pub catalog: Vec<ChannelId>,
}

impl Cohort {
    pub fn p(&self) -> usize {
        self.catalog.len()
    }

    pub fn record(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.records
            .binary_search_by(|r| r.patient_id.as_str().cmp(patient_id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Attach demographics and add the demographic channels to the catalog.
    ///
    /// Every record must have a row; rows for unknown patients are ignored.
    pub fn attach_demographics(&mut self, table: &BTreeMap<String, Demographics>) -> Result<()> {
        let mut races = BTreeSet::new();
        for rec in &mut self.records {
            let demo = table.get(&rec.patient_id).ok_or_else(|| {
                Error::invalid(format!("no demographics row for patient `{}`", rec.patient_id))
            })?;
            if demo.birth_day > rec.span.first_day {
                return Err(Error::invalid(format!(
                    "patient `{}` born after the record starts",
                    rec.patient_id
                )));
            }
            races.extend(demo.races.iter().cloned());
            rec.demographics = Some(demo.clone());
        }
        self.catalog.retain(|c| c.kind != ChannelKind::Demographic);
        self.catalog.push(ChannelId::new(ChannelKind::Demographic, SEX_CHANNEL));
        self.catalog.push(ChannelId::new(ChannelKind::Demographic, AGE_CHANNEL));
        for race in races {
            self.catalog.push(ChannelId::new(ChannelKind::Demographic, format!("{RACE_PREFIX}{race}")));
        }
        self.catalog.sort();
        Ok(())
    }

    pub fn manifest(&self) -> CohortManifest {
        CohortManifest {
            p: self.p(),
            n_records: self.records.len(),
            catalog: self.catalog.clone(),
            records: self
                .records
                .iter()
                .map(|r| RecordSpan {
                    patient_id: r.patient_id.clone(),
                    first_day: r.span.first_day,
                    last_day: r.span.last_day,
                })
                .collect(),
        }
    }
}

/// Catalog and per-patient spans, serialized as JSON next to a cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub p: usize,
    pub n_records: usize,
    pub catalog: Vec<ChannelId>,
    pub records: Vec<RecordSpan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSpan {
    pub patient_id: String,
    pub first_day: i64,
    pub last_day: i64,
}

#[derive(Default)]
struct RecordBuilder {
    code_events: Vec<CodeEvent>,
    measurements: Vec<Measurement>,
    visits: BTreeMap<i64, BTreeSet<String>>,
    min_day: i64,
    max_day: i64,
}

impl RecordBuilder {
    fn touch(&mut self, day: i64) {
        if self.code_events.is_empty() && self.measurements.is_empty() && self.visits.is_empty() {
            self.min_day = day;
            self.max_day = day;
        } else {
            self.min_day = self.min_day.min(day);
            self.max_day = self.max_day.max(day);
        }
    }
}

fn parse_day(s: &str, line: usize) -> Result<i64> {
    s.trim()
        .parse::<i64>()
        .map_err(|_| Error::Parse { line, msg: format!("invalid day `{s}`") })
}

/// Parse a line-delimited event stream into a cohort.
///
/// Events are grouped by patient; each span is `[min day, max day]` over the
/// patient's events. Records are ordered by patient id and events by day
/// (stable, so same-day input order is kept).
pub fn parse_event_log<R: BufRead>(reader: R) -> Result<Cohort> {
    let mut builders: BTreeMap<String, RecordBuilder> = BTreeMap::new();
    let mut catalog: BTreeSet<ChannelId> = BTreeSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 4 || fields.len() > 5 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 or 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let (pid, kind, channel) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if pid.is_empty() {
            return Err(Error::Parse { line: lineno, msg: "empty patient id".into() });
        }
        if channel.is_empty() {
            return Err(Error::Parse { line: lineno, msg: "empty channel".into() });
        }
        let day = parse_day(fields[3], lineno)?;
        let value = fields.get(4).map(|s| s.trim()).filter(|s| !s.is_empty());
        let b = builders.entry(pid.to_string()).or_default();
        match kind {
            "code" | "medication" | "visit" => {
                if value.is_some() {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("a value is not allowed on `{kind}` lines"),
                    });
                }
            }
            "measurement" => {}
            other => {
                return Err(Error::Parse { line: lineno, msg: format!("unknown event kind `{other}`") });
            }
        }
        b.touch(day);
        match kind {
            "code" => {
                catalog.insert(ChannelId::new(ChannelKind::Code, channel));
                b.code_events.push(CodeEvent { channel: channel.to_string(), day });
            }
            "measurement" => {
                let raw = value.ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: "measurement line without a value".into(),
                })?;
                let v: f64 = raw.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("invalid measurement value `{raw}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line: lineno, msg: "non-finite measurement value".into() });
                }
                catalog.insert(ChannelId::new(ChannelKind::Measurement, channel));
                b.measurements.push(Measurement { channel: channel.to_string(), day, value: v });
            }
            "medication" => {
                catalog.insert(ChannelId::new(ChannelKind::Medication, channel));
                b.visits.entry(day).or_default().insert(channel.to_string());
            }
            "visit" => {
                if channel != "-" {
                    return Err(Error::Parse { line: lineno, msg: "visit lines use `-` as channel".into() });
                }
                b.visits.entry(day).or_default();
            }
            _ => unreachable!(),
        }
    }

    let records = builders
        .into_iter()
        .map(|(patient_id, mut b)| {
            b.code_events.sort_by_key(|e| e.day);
            b.measurements.sort_by_key(|m| m.day);
            PatientRecord {
                patient_id,
                span: Span { first_day: b.min_day, last_day: b.max_day },
                code_events: b.code_events,
                measurements: b.measurements,
                visits: b
                    .visits
                    .into_iter()
                    .map(|(day, medications)| Visit { day, medications })
                    .collect(),
                demographics: None,
            }
        })
        .collect();

    Ok(Cohort { records, catalog: catalog.into_iter().collect() })
}

/// Parse the demographics table.
pub fn parse_demographics<R: BufRead>(reader: R) -> Result<BTreeMap<String, Demographics>> {
    let mut out = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let female = match fields[1] {
            "F" => true,
            "M" => false,
            other => return Err(Error::Parse { line: lineno, msg: format!("invalid sex `{other}`") }),
        };
        let races = if fields[2] == "-" || fields[2].is_empty() {
            BTreeSet::new()
        } else {
            fields[2].split(',').map(|r| r.trim().to_string()).filter(|r| !r.is_empty()).collect()
        };
        let birth_day = parse_day(fields[3], lineno)?;
        if out
            .insert(fields[0].to_string(), Demographics { female, races, birth_day })
            .is_some()
        {
            return Err(Error::Parse { line: lineno, msg: format!("duplicate patient `{}`", fields[0]) });
        }
    }
    Ok(out)
}

/// Write the cohort's events in the format read by [`parse_event_log`].
pub fn write_event_log<W: Write>(cohort: &Cohort, mut w: W) -> Result<()> {
    for rec in &cohort.records {
        let pid = &rec.patient_id;
        for e in &rec.code_events {
            writeln!(w, "{pid}\tcode\t{}\t{}", e.channel, e.day)?;
        }
        for m in &rec.measurements {
            writeln!(w, "{pid}\tmeasurement\t{}\t{}\t{}", m.channel, m.day, m.value)?;
        }
        for v in &rec.visits {
            if v.medications.is_empty() {
                writeln!(w, "{pid}\tvisit\t-\t{}", v.day)?;
            }
            for med in &v.medications {
                writeln!(w, "{pid}\tmedication\t{med}\t{}", v.day)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_demographics<W: Write>(cohort: &Cohort, mut w: W) -> Result<()> {
    for rec in &cohort.records {
        if let Some(d) = &rec.demographics {
            let races = if d.races.is_empty() {
                "-".to_string()
            } else {
                d.races.iter().cloned().collect::<Vec<_>>().join(",")
            };
            writeln!(w, "{}\t{}\t{}\t{}", rec.patient_id, if d.female { "F" } else { "M" }, races, d.birth_day)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-channel (total events, distinct records) over the cohort.
pub fn channel_counts(cohort: &Cohort) -> HashMap<ChannelId, (usize, usize)> {
    let mut counts: HashMap<ChannelId, (usize, usize)> = HashMap::new();
    for rec in &cohort.records {
        let mut local: HashMap<ChannelId, usize> = HashMap::new();
        for e in &rec.code_events {
            *local.entry(ChannelId::new(ChannelKind::Code, e.channel.as_str())).or_default() += 1;
        }
        for m in &rec.measurements {
            *local.entry(ChannelId::new(ChannelKind::Measurement, m.channel.as_str())).or_default() += 1;
        }
        for v in &rec.visits {
            for med in &v.medications {
                *local.entry(ChannelId::new(ChannelKind::Medication, med.as_str())).or_default() += 1;
            }
        }
        for (ch, n) in local {
            let c = counts.entry(ch).or_default();
            c.0 += n;
            c.1 += 1;
        }
    }
    counts
}

/// Drop channels with fewer than `min_total_events` events or appearing in
/// fewer than `min_records` records. Demographic channels are always kept.
pub fn filter_channels(cohort: &Cohort, min_total_events: usize, min_records: usize) -> Cohort {
    let counts = channel_counts(cohort);
    let keep: BTreeSet<ChannelId> = cohort
        .catalog
        .iter()
        .filter(|c| {
            if c.kind == ChannelKind::Demographic {
                return true;
            }
            let (events, records) = counts.get(*c).copied().unwrap_or((0, 0));
            events >= min_total_events && records >= min_records
        })
        .cloned()
        .collect();
    let kept = |kind: ChannelKind, name: &str| keep.contains(&ChannelId::new(kind, name));

    let records = cohort
        .records
        .iter()
        .map(|r| PatientRecord {
            patient_id: r.patient_id.clone(),
            span: r.span,
            code_events: r
                .code_events
                .iter()
                .filter(|e| kept(ChannelKind::Code, &e.channel))
                .cloned()
                .collect(),
            measurements: r
                .measurements
                .iter()
                .filter(|m| kept(ChannelKind::Measurement, &m.channel))
                .cloned()
                .collect(),
            visits: r
                .visits
                .iter()
                .map(|v| Visit {
                    day: v.day,
                    medications: v
                        .medications
                        .iter()
                        .filter(|m| kept(ChannelKind::Medication, m))
                        .cloned()
                        .collect(),
                })
                .collect(),
            demographics: r.demographics.clone(),
        })
        .collect();

    Cohort { records, catalog: keep.into_iter().collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Cohort> {
        parse_event_log(s.as_bytes())
    }

    #[test]
    fn empty_stream_gives_empty_cohort() {
        let c = parse("").unwrap();
        assert_eq!(c.p(), 0);
        assert!(c.records.is_empty());
    }

    #[test]
    fn singleton_code_event() {
        let c = parse("p1\tcode\tC1\t5\n").unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.records[0].span, Span { first_day: 5, last_day: 5 });
        assert_eq!(c.catalog, vec![ChannelId::new(ChannelKind::Code, "C1")]);
    }

    #[test]
    fn shared_channel_appears_once() {
        let c = parse("p1\tcode\tC1\t5\np2\tcode\tC1\t9\np2\tcode\tC2\t1\n").unwrap();
        let names: BTreeSet<_> = ["C1", "C2"].into_iter().collect();
        assert_eq!(c.catalog.len(), names.len());
        assert_eq!(c.records[1].span, Span { first_day: 1, last_day: 9 });
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = parse("p1\tcode\tC1\t5\np1\tcode\tC1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse("p1\tlab\tC1\t5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(parse("p1\tmeasurement\tM\t5\n").is_err());
        assert!(parse("p1\tcode\tC1\t5\t1.0\n").is_err());
        assert!(parse("p1\tmeasurement\tM\t5\tNaN\n").is_err());
        assert!(parse("p1\tcode\tC1\tx\n").is_err());
    }

    #[test]
    fn medication_lines_group_into_visits() {
        let c = parse("p\tmedication\tD1\t0\np\tmedication\tD2\t0\np\tvisit\t-\t100\n").unwrap();
        let r = &c.records[0];
        assert_eq!(r.visit_days(), vec![0, 100]);
        assert_eq!(r.medication_days("D1"), vec![0]);
        assert_eq!(r.span, Span { first_day: 0, last_day: 100 });
    }

    #[test]
    fn duplicate_events_are_kept() {
        let c = parse("p\tcode\tC\t3\np\tcode\tC\t3\n").unwrap();
        assert_eq!(c.records[0].code_days("C"), vec![3, 3]);
    }

    fn counted_cohort(events: usize, records: usize) -> Cohort {
        let mut s = String::new();
        for i in 0..events {
            s.push_str(&format!("p{}\tcode\tC\t{}\n", i % records, i));
        }
        s.push_str("p0\tcode\tOTHER\t0\n");
        parse(&s).unwrap()
    }

    #[test]
    fn filter_threshold_boundaries() {
        let kept = filter_channels(&counted_cohort(1000, 10), 1000, 10);
        assert!(kept.catalog.contains(&ChannelId::new(ChannelKind::Code, "C")));
        let dropped = filter_channels(&counted_cohort(999, 50), 1000, 10);
        assert!(!dropped.catalog.contains(&ChannelId::new(ChannelKind::Code, "C")));
        assert!(dropped.records.iter().all(|r| r.code_events.iter().all(|e| e.channel != "C")));
    }

    #[test]
    fn vacuous_filter_is_identity() {
        let c = counted_cohort(30, 4);
        assert_eq!(filter_channels(&c, 0, 0), c);
    }

    #[test]
    fn demographics_exempt_from_filter() {
        let mut c = parse("p1\tcode\tC1\t5\n").unwrap();
        let table = parse_demographics("p1\tF\twhite\t-10000\n".as_bytes()).unwrap();
        c.attach_demographics(&table).unwrap();
        let f = filter_channels(&c, 1_000_000, 1_000_000);
        assert_eq!(f.p(), 3);
        assert!(f.catalog.iter().all(|ch| ch.kind == ChannelKind::Demographic));
    }

    #[test]
    fn missing_demographics_row_is_an_error() {
        let mut c = parse("p1\tcode\tC1\t5\n").unwrap();
        assert!(c.attach_demographics(&BTreeMap::new()).is_err());
    }

    #[test]
    fn manifest_lists_spans() {
        let c = parse("b\tcode\tC\t3\na\tcode\tC\t1\na\tcode\tC\t4\n").unwrap();
        let m = c.manifest();
        assert_eq!(m.records[0].patient_id, "a");
        assert_eq!((m.records[0].first_day, m.records[0].last_day), (1, 4));
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<CohortManifest>(&json).unwrap(), m);
    }
}
