//! Multi-type recurrent event data: ingestion, validation, distinct-time
//! tables and risk sets.
//!
//! The censoring time `τ_i` is held per subject. Files may carry it either as
//! one `status = 0` row per (subject, type) or as a single row whose event type
//! is `*`; both are folded into the subject-level value on load, and per-type
//! rows are written back on save.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const ALL_TYPES_LABEL: &str = "*";

/// One row of an event file. `event_type` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub subject_id: String,
    pub event_type: usize,
    pub time: f64,
    pub status: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub covariates: Vec<f64>,
    pub censoring_time: f64,
    /// `events[j]` holds the strictly increasing type-`j` event times.
    pub events: Vec<Vec<f64>>,
}

impl SubjectData {
    pub fn n_events(&self, j: usize) -> usize {
        self.events[j].len()
    }

    pub fn total_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    pub fn linear_predictor(&self, beta: &[f64]) -> f64 {
        self.covariates.iter().zip(beta).map(|(x, b)| x * b).sum()
    }

    /// Flattens the subject back into file records (events then one
    /// censoring row per type).
    pub fn records(&self) -> Vec<EventRecord> {
        let mut out = Vec::new();
        for (j, times) in self.events.iter().enumerate() {
            for &t in times {
                out.push(EventRecord { subject_id: self.id.clone(), event_type: j + 1, time: t, status: 1 });
            }
            out.push(EventRecord {
                subject_id: self.id.clone(),
                event_type: j + 1,
                time: self.censoring_time,
                status: 0,
            });
        }
        out
    }
}

/// Validated data set with per-type distinct event times and tie counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    subjects: Vec<SubjectData>,
    type_labels: Vec<String>,
    covariate_names: Vec<String>,
    distinct_times: Vec<Vec<f64>>,
    tie_counts: Vec<Vec<usize>>,
}

/// Column names used to read an event file.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub subject_id: String,
    pub event_type: String,
    pub time: String,
    pub status: String,
    /// Covariate columns; `None` takes every remaining column in file order.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            subject_id: "subject_id".into(),
            event_type: "event_type".into(),
            time: "time".into(),
            status: "status".into(),
            covariates: None,
        }
    }
}

fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

impl Dataset {
    /// Validates subjects and builds the distinct-time tables. Subjects are
    /// put into canonical order (numeric ids numerically, others lexically).
    pub fn new(mut subjects: Vec<SubjectData>, type_labels: Vec<String>, covariate_names: Vec<String>) -> Result<Self> {
        let m = type_labels.len();
        let p = covariate_names.len();
        if m == 0 {
            return Err(Error::Data("at least one event type is required".into()));
        }
        subjects.sort_by(|a, b| compare_ids(&a.id, &b.id));
        for w in subjects.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Validation { subject: w[0].id.clone(), message: "subject appears twice".into() });
            }
        }
        for s in &subjects {
            let fail = |message: String| Err(Error::Validation { subject: s.id.clone(), message });
            if s.covariates.len() != p {
                return fail(format!("expected {p} covariates, found {}", s.covariates.len()));
            }
            if s.covariates.iter().any(|x| !x.is_finite()) {
                return fail("non-finite covariate".into());
            }
            if !(s.censoring_time > 0.0) || !s.censoring_time.is_finite() {
                return fail(format!("censoring time {} must be positive and finite", s.censoring_time));
            }
            if s.events.len() != m {
                return fail(format!("expected event lists for {m} types, found {}", s.events.len()));
            }
            for (j, times) in s.events.iter().enumerate() {
                for &t in times {
                    if !(t > 0.0) || !t.is_finite() {
                        return fail(format!("type {} event time {t} must be positive", type_labels[j]));
                    }
                    if t >= s.censoring_time {
                        return fail(format!(
                            "type {} event at {t} is not before censoring time {}",
                            type_labels[j], s.censoring_time
                        ));
                    }
                }
                for w in times.windows(2) {
                    if w[0] == w[1] {
                        return fail(format!("duplicate type {} event at {}", type_labels[j], w[0]));
                    }
                    if w[0] > w[1] {
                        return fail(format!("type {} events are not sorted", type_labels[j]));
                    }
                }
            }
        }

        let mut distinct_times = Vec::with_capacity(m);
        let mut tie_counts = Vec::with_capacity(m);
        for j in 0..m {
            let mut all: Vec<f64> = subjects.iter().flat_map(|s| s.events[j].iter().copied()).collect();
            all.sort_by(f64::total_cmp);
            let mut times: Vec<f64> = Vec::new();
            let mut counts: Vec<usize> = Vec::new();
            for t in all {
                match times.last() {
                    Some(&last) if last == t => *counts.last_mut().unwrap() += 1,
                    _ => {
                        times.push(t);
                        counts.push(1);
                    }
                }
            }
            distinct_times.push(times);
            tie_counts.push(counts);
        }
        Ok(Dataset { subjects, type_labels, covariate_names, distinct_times, tie_counts })
    }

    pub fn subjects(&self) -> &[SubjectData] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_types(&self) -> usize {
        self.type_labels.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn type_labels(&self) -> &[String] {
        &self.type_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn distinct_times(&self, j: usize) -> &[f64] {
        &self.distinct_times[j]
    }

    pub fn tie_counts(&self, j: usize) -> &[usize] {
        &self.tie_counts[j]
    }

    pub fn total_events(&self, j: usize) -> usize {
        self.subjects.iter().map(|s| s.n_events(j)).sum()
    }

    /// Fraction of subjects with no events of any type.
    pub fn event_free_fraction(&self) -> f64 {
        if self.subjects.is_empty() {
            return 0.0;
        }
        let free = self.subjects.iter().filter(|s| s.total_events() == 0).count();
        free as f64 / self.subjects.len() as f64
    }

    pub fn load(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column `{name}`") })
        };
        let c_id = find(&schema.subject_id)?;
        let c_type = find(&schema.event_type)?;
        let c_time = find(&schema.time)?;
        let c_status = find(&schema.status)?;
        let fixed = [c_id, c_type, c_time, c_status];
        let cov_cols: Vec<usize> = match &schema.covariates {
            Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
            None => (0..headers.len()).filter(|c| !fixed.contains(c)).collect(),
        };
        let covariate_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].to_string()).collect();

        struct Raw {
            covariates: Vec<f64>,
            first_line: usize,
            events: Vec<(String, f64)>,
            censor_all: Option<f64>,
            censor_typed: Vec<(String, f64)>,
        }
        let mut type_labels: Vec<String> = Vec::new();
        let mut raw: BTreeMap<String, Raw> = BTreeMap::new();

        for (idx, rec) in rdr.records().enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            if rec.len() != headers.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", headers.len(), rec.len()),
                });
            }
            let num = |c: usize, what: &str| -> Result<f64> {
                rec[c]
                    .parse::<f64>()
                    .map_err(|_| Error::Parse { line, message: format!("invalid {what} `{}`", &rec[c]) })
            };
            let id = rec[c_id].to_string();
            if id.is_empty() {
                return Err(Error::Parse { line, message: "empty subject_id".into() });
            }
            let label = rec[c_type].to_string();
            if label.is_empty() {
                return Err(Error::Parse { line, message: "empty event_type".into() });
            }
            let time = num(c_time, "time")?;
            let status = match &rec[c_status] {
                "1" => 1u8,
                "0" => 0u8,
                other => return Err(Error::Parse { line, message: format!("status must be 0 or 1, found `{other}`") }),
            };
            let covariates: Vec<f64> = cov_cols.iter().map(|&c| num(c, "covariate")).collect::<Result<_>>()?;
            if label != ALL_TYPES_LABEL && !type_labels.contains(&label) {
                type_labels.push(label.clone());
            }
            let entry = raw.entry(id.clone()).or_insert_with(|| Raw {
                covariates: covariates.clone(),
                first_line: line,
                events: Vec::new(),
                censor_all: None,
                censor_typed: Vec::new(),
            });
            if entry.covariates != covariates {
                return Err(Error::Validation {
                    subject: id,
                    message: format!("covariates on line {line} differ from line {}", entry.first_line),
                });
            }
            match (status, label.as_str()) {
                (1, ALL_TYPES_LABEL) => {
                    return Err(Error::Parse { line, message: "event rows need a concrete event type".into() })
                }
                (1, _) => entry.events.push((label, time)),
                (_, ALL_TYPES_LABEL) => {
                    if entry.censor_all.is_some() {
                        return Err(Error::Validation { subject: id, message: "duplicate censoring record".into() });
                    }
                    entry.censor_all = Some(time);
                }
                _ => {
                    if entry.censor_typed.iter().any(|(l, _)| *l == label) {
                        return Err(Error::Validation {
                            subject: id,
                            message: format!("duplicate censoring record for type {label}"),
                        });
                    }
                    entry.censor_typed.push((label, time));
                }
            }
        }

        let m = type_labels.len();
        if m == 0 {
            return Err(Error::Data("no event types found".into()));
        }
        let label_index: HashMap<&str, usize> = type_labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut subjects = Vec::with_capacity(raw.len());
        for (id, r) in raw {
            let fail = |message: String| Err(Error::Validation { subject: id.clone(), message });
            let tau = match (r.censor_all, r.censor_typed.is_empty()) {
                (Some(_), false) => return fail("duplicate censoring record (both `*` and per-type rows)".into()),
                (Some(t), true) => t,
                (None, true) => return fail("missing censoring record".into()),
                (None, false) => {
                    if r.censor_typed.len() != m {
                        return fail(format!("censoring rows cover {} of {m} event types", r.censor_typed.len()));
                    }
                    let t0 = r.censor_typed[0].1;
                    if r.censor_typed.iter().any(|(_, t)| *t != t0) {
                        return fail("per-type censoring times differ".into());
                    }
                    t0
                }
            };
            let mut events = vec![Vec::new(); m];
            for (label, t) in r.events {
                events[label_index[label.as_str()]].push(t);
            }
            for e in &mut events {
                e.sort_by(f64::total_cmp);
            }
            subjects.push(SubjectData { id, covariates: r.covariates, censoring_time: tau, events });
        }
        Dataset::new(subjects, type_labels, covariate_names)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        self.write_csv(std::io::BufWriter::new(file)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "subject_id,event_type,time,status")?;
        for name in &self.covariate_names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for s in &self.subjects {
            for r in s.records() {
                write!(w, "{},{},{},{}", r.subject_id, self.type_labels[r.event_type - 1], r.time, r.status)?;
                for x in &s.covariates {
                    write!(w, ",{x}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()
    }
}

/// Risk sets `R(t_j(l)) = {i : τ_i ≥ t_j(l)}` and per-subject lookups into
/// the distinct-time tables.
///
/// Subjects are held in order of decreasing censoring time, so every risk set
/// is a prefix of that order.
#[derive(Debug, Clone)]
pub struct RiskSetIndex {
    by_censoring_desc: Vec<usize>,
    sizes: Vec<Vec<usize>>,
    at_risk_count: Vec<Vec<usize>>,
    event_slots: Vec<Vec<Vec<usize>>>,
}

impl RiskSetIndex {
    pub fn build(d: &Dataset) -> Self {
        let n = d.n_subjects();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d.subjects[b].censoring_time.total_cmp(&d.subjects[a].censoring_time).then(a.cmp(&b)));
        let taus_desc: Vec<f64> = order.iter().map(|&i| d.subjects[i].censoring_time).collect();
        let mut sizes = Vec::with_capacity(d.n_types());
        let mut at_risk_count = Vec::with_capacity(d.n_types());
        let mut event_slots = Vec::with_capacity(d.n_types());
        for j in 0..d.n_types() {
            let times = d.distinct_times(j);
            sizes.push(times.iter().map(|&t| taus_desc.partition_point(|&tau| tau >= t)).collect());
            at_risk_count.push(d.subjects.iter().map(|s| times.partition_point(|&t| t <= s.censoring_time)).collect());
            event_slots.push(
                d.subjects
                    .iter()
                    .map(|s| {
                        s.events[j]
                            .iter()
                            .map(|&t| times.binary_search_by(|x| x.total_cmp(&t)).expect("event time is tabulated"))
                            .collect()
                    })
                    .collect(),
            );
        }
        RiskSetIndex { by_censoring_desc: order, sizes, at_risk_count, event_slots }
    }

    /// Subject indices at risk at the `l`-th distinct type-`j` time.
    pub fn members(&self, j: usize, l: usize) -> &[usize] {
        &self.by_censoring_desc[..self.sizes[j][l]]
    }

    pub fn size(&self, j: usize, l: usize) -> usize {
        self.sizes[j][l]
    }

    /// Subjects ordered by decreasing censoring time.
    pub fn order(&self) -> &[usize] {
        &self.by_censoring_desc
    }

    /// Number of distinct type-`j` times `≤ τ_i`; subject `i` is at risk at
    /// exactly the first this-many distinct times.
    pub fn at_risk_count(&self, j: usize, i: usize) -> usize {
        self.at_risk_count[j][i]
    }

    /// Distinct-time slot of each of subject `i`'s type-`j` events.
    pub fn event_slots(&self, j: usize, i: usize) -> &[usize] {
        &self.event_slots[j][i]
    }
}
