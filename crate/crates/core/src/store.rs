//! In-memory index of trial records: ingest from JSONL, MeSH-term matching
//! and ranking by `sample_size / rob`.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::aspect::Aspect;
use crate::tokenizer;

pub const DEFAULT_TOP_K: usize = 5;

/// One randomized controlled trial with its precomputed extractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub population: String,
    pub interventions: String,
    pub outcomes: String,
    pub punchline: String,
    pub p_mesh: Vec<String>,
    pub i_mesh: Vec<String>,
    pub o_mesh: Vec<String>,
    pub sample_size: u64,
    pub rob: f64,
}

impl TrialRecord {
    pub fn aspect_text(&self, aspect: Aspect) -> &str {
        match aspect {
            Aspect::Population => &self.population,
            Aspect::Interventions => &self.interventions,
            Aspect::Outcomes => &self.outcomes,
            Aspect::Punchline => &self.punchline,
        }
    }

    /// Ranking score: larger and less biased trials first.
    pub fn score(&self) -> f64 {
        self.sample_size as f64 / self.rob
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.id.trim().is_empty() {
            return Err(("id", "must be non-empty".into()));
        }
        if self.sample_size < 1 {
            return Err(("sample_size", "must be at least 1".into()));
        }
        if !(self.rob > 0.0 && self.rob.is_finite()) {
            return Err(("rob", format!("must be a positive finite number, got {}", self.rob)));
        }
        for aspect in Aspect::ALL {
            if tokenizer::normalize(self.aspect_text(aspect)).is_empty() {
                return Err((aspect.name(), "must be non-empty after normalization".into()));
            }
        }
        Ok(())
    }
}

pub fn score(record: &TrialRecord) -> f64 {
    record.score()
}

pub fn normalize_term(term: &str) -> String {
    term.trim().to_lowercase()
}

/// MeSH terms per query axis; an empty axis places no constraint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(default)]
    pub population_terms: BTreeSet<String>,
    #[serde(default)]
    pub intervention_terms: BTreeSet<String>,
    #[serde(default)]
    pub outcome_terms: BTreeSet<String>,
}

impl Query {
    pub fn new<P, I, O>(population: P, interventions: I, outcomes: O) -> Self
    where
        P: IntoIterator,
        P::Item: AsRef<str>,
        I: IntoIterator,
        I::Item: AsRef<str>,
        O: IntoIterator,
        O::Item: AsRef<str>,
    {
        fn norm<T: IntoIterator>(terms: T) -> BTreeSet<String>
        where
            T::Item: AsRef<str>,
        {
            terms
                .into_iter()
                .map(|t| normalize_term(t.as_ref()))
                .filter(|t| !t.is_empty())
                .collect()
        }
        Self {
            population_terms: norm(population),
            intervention_terms: norm(interventions),
            outcome_terms: norm(outcomes),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.population_terms.is_empty()
            && self.intervention_terms.is_empty()
            && self.outcome_terms.is_empty()
    }

    fn normalized(&self) -> Query {
        Query::new(
            &self.population_terms,
            &self.intervention_terms,
            &self.outcome_terms,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_TOP_K }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult<'a> {
    pub record: &'a TrialRecord,
    pub score: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field \"{field}\": {reason}")]
    Malformed {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("line {line}: invalid JSON: {reason}")]
    Json { line: usize, reason: String },
    #[error("line {line}: duplicate trial id \"{id}\"")]
    DuplicateId { line: usize, id: String },
    #[error("query must contain at least one term")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
}

const FIELDS: [(&str, FieldKind); 12] = [
    ("id", FieldKind::Str),
    ("title", FieldKind::Str),
    ("abstract", FieldKind::Str),
    ("population", FieldKind::Str),
    ("interventions", FieldKind::Str),
    ("outcomes", FieldKind::Str),
    ("punchline", FieldKind::Str),
    ("p_mesh", FieldKind::StrArray),
    ("i_mesh", FieldKind::StrArray),
    ("o_mesh", FieldKind::StrArray),
    ("sample_size", FieldKind::Integer),
    ("rob", FieldKind::Number),
];

#[derive(Clone, Copy)]
enum FieldKind {
    Str,
    StrArray,
    Integer,
    Number,
}

impl FieldKind {
    fn check(self, v: &Value) -> Result<(), &'static str> {
        let ok = match self {
            FieldKind::Str => v.is_string(),
            FieldKind::StrArray => v
                .as_array()
                .is_some_and(|a| a.iter().all(Value::is_string)),
            FieldKind::Integer => v.is_u64(),
            FieldKind::Number => v.is_number(),
        };
        if ok {
            Ok(())
        } else {
            Err(match self {
                FieldKind::Str => "expected a string",
                FieldKind::StrArray => "expected an array of strings",
                FieldKind::Integer => "expected a non-negative integer",
                FieldKind::Number => "expected a number",
            })
        }
    }
}

fn parse_line(line_no: usize, line: &str) -> Result<TrialRecord, StoreError> {
    let value: Value = serde_json::from_str(line).map_err(|e| StoreError::Json {
        line: line_no,
        reason: e.to_string(),
    })?;
    let obj: &Map<String, Value> = value.as_object().ok_or_else(|| StoreError::Json {
        line: line_no,
        reason: "expected a JSON object".into(),
    })?;
    let malformed = |field: &str, reason: &str| StoreError::Malformed {
        line: line_no,
        field: field.to_string(),
        reason: reason.to_string(),
    };
    for key in obj.keys() {
        if !FIELDS.iter().any(|(f, _)| f == key) {
            return Err(malformed(key, "unknown field"));
        }
    }
    for (field, kind) in FIELDS {
        let v = obj.get(field).ok_or_else(|| malformed(field, "missing"))?;
        kind.check(v).map_err(|r| malformed(field, r))?;
    }
    serde_json::from_value(value).map_err(|e| StoreError::Json {
        line: line_no,
        reason: e.to_string(),
    })
}

/// Immutable store of trial records, indexed by id and by MeSH term.
#[derive(Debug, Default)]
pub struct TrialStore {
    records: Vec<TrialRecord>,
    by_id: HashMap<String, usize>,
    postings: [HashMap<String, Vec<usize>>; 3],
}

impl TrialStore {
    pub fn from_records(records: Vec<TrialRecord>) -> Result<Self, StoreError> {
        let mut store = TrialStore::default();
        for (i, record) in records.into_iter().enumerate() {
            store.insert(i + 1, record)?;
        }
        Ok(store)
    }

    /// Loads a JSONL file. Blank lines are skipped; line numbers are 1-based.
    pub fn ingest(path: impl AsRef<Path>) -> Result<(Self, usize), StoreError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let store = Self::parse_jsonl(&text)?;
        let n = store.len();
        Ok((store, n))
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, StoreError> {
        let mut store = TrialStore::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = parse_line(i + 1, line)?;
            store.insert(i + 1, record)?;
        }
        Ok(store)
    }

    fn insert(&mut self, line: usize, mut record: TrialRecord) -> Result<(), StoreError> {
        for terms in [&mut record.p_mesh, &mut record.i_mesh, &mut record.o_mesh] {
            for t in terms.iter_mut() {
                *t = normalize_term(t);
            }
        }
        record.validate().map_err(|(field, reason)| StoreError::Malformed {
            line,
            field: field.to_string(),
            reason,
        })?;
        if self.by_id.contains_key(&record.id) {
            return Err(StoreError::DuplicateId {
                line,
                id: record.id,
            });
        }
        let idx = self.records.len();
        self.by_id.insert(record.id.clone(), idx);
        for (axis, terms) in [&record.p_mesh, &record.i_mesh, &record.o_mesh]
            .into_iter()
            .enumerate()
        {
            let unique: BTreeSet<&String> = terms.iter().collect();
            for t in unique {
                self.postings[axis].entry(t.clone()).or_default().push(idx);
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&TrialRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// Records matching every non-empty query axis, best score first, at most `k`.
    pub fn search(
        &self,
        query: &Query,
        config: &RetrievalConfig,
    ) -> Result<Vec<RankedResult<'_>>, StoreError> {
        if config.k == 0 {
            return Err(StoreError::InvalidK);
        }
        let query = query.normalized();
        if query.is_empty() {
            return Err(StoreError::EmptyQuery);
        }
        let axes = [
            &query.population_terms,
            &query.intervention_terms,
            &query.outcome_terms,
        ];
        let mut candidates: Option<BTreeSet<usize>> = None;
        for (axis, terms) in axes.into_iter().enumerate() {
            if terms.is_empty() {
                continue;
            }
            let hits: BTreeSet<usize> = terms
                .iter()
                .filter_map(|t| self.postings[axis].get(t))
                .flatten()
                .copied()
                .collect();
            candidates = Some(match candidates {
                None => hits,
                Some(prev) => prev.intersection(&hits).copied().collect(),
            });
        }
        let mut ranked: Vec<RankedResult<'_>> = candidates
            .unwrap_or_default()
            .into_iter()
            .map(|i| RankedResult {
                record: &self.records[i],
                score: self.records[i].score(),
            })
            .collect();
        ranked.sort_by(|a, b| rank_order(a.record, b.record));
        ranked.truncate(config.k);
        Ok(ranked)
    }
}

/// Score descending, then larger sample, then id ascending.
pub fn rank_order(a: &TrialRecord, b: &TrialRecord) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.sample_size.cmp(&a.sample_size))
        .then_with(|| a.id.cmp(&b.id))
}
