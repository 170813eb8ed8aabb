//! Request handling shared by the HTTP service and the command line.
//!
//! Every operation returns the exact JSON text sent to clients, so both
//! front ends stay byte-identical.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aspect::Aspect;
use crate::bundle::AspectBundle;
use crate::decoding::{decode, DecodeConfig, Session};
use crate::direction::Direction;
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{Architecture, Model};
use crate::provenance::{snippets_for_token, trace_summary, TokenLabel};
use crate::store::{Query, RetrievalConfig, StoreError, TrialRecord, TrialStore, DEFAULT_TOP_K};
use crate::templates::{infill, InfillError, InfillOptions, TemplateCatalog, TemplateError};
use crate::tokenizer::Vocabulary;

pub const WARNING: &str = "For research use only. These summaries are generated automatically, \
are often unreliable, and must not be trusted or used to inform clinical decisions.";

pub const DEFAULT_CACHE_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(m: impl Into<String>) -> Self {
        Self::new(400, m)
    }

    pub fn not_found(m: impl Into<String>) -> Self {
        Self::new(404, m)
    }

    pub fn unprocessable(m: impl Into<String>) -> Self {
        Self::new(422, m)
    }

    pub fn body(&self) -> String {
        to_json(&serde_json::json!({ "error": self.message }))
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.message, self.status)
    }
}

impl std::error::Error for ApiError {}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("response types serialize")
}

/// Parses a JSON request body; malformed bodies are a 400.
pub fn parse_request<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, ApiError> {
    serde_json::from_str(body).map_err(|e| ApiError::bad_request(format!("invalid request: {e}")))
}

/// Small least-recently-used map.
#[derive(Debug)]
pub struct LruCache<K, V> {
    capacity: usize,
    tick: u64,
    entries: HashMap<K, (V, u64)>,
    order: BTreeMap<u64, K>,
}

impl<K: Eq + Hash + Clone, V: Clone> LruCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            tick: 0,
            entries: HashMap::new(),
            order: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn touch(&mut self, key: &K) {
        self.tick += 1;
        if let Some((_, t)) = self.entries.get_mut(key) {
            self.order.remove(t);
            *t = self.tick;
            self.order.insert(self.tick, key.clone());
        }
    }

    pub fn get(&mut self, key: &K) -> Option<V> {
        self.touch(key);
        self.entries.get(key).map(|(v, _)| v.clone())
    }

    pub fn put(&mut self, key: K, value: V) {
        if self.capacity == 0 {
            return;
        }
        if let Some((v, _)) = self.entries.get_mut(&key) {
            *v = value;
            self.touch(&key);
            return;
        }
        if self.entries.len() == self.capacity {
            if let Some((_, oldest)) = self.order.pop_first() {
                self.entries.remove(&oldest);
            }
        }
        self.tick += 1;
        self.order.insert(self.tick, key.clone());
        self.entries.insert(key, (value, self.tick));
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryBody {
    #[serde(default)]
    pub population: Vec<String>,
    #[serde(default)]
    pub intervention: Vec<String>,
    #[serde(default)]
    pub outcome: Vec<String>,
}

impl QueryBody {
    fn to_query(&self) -> Query {
        Query::new(&self.population, &self.intervention, &self.outcome)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchRequest {
    #[serde(flatten)]
    pub query: QueryBody,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub title: String,
    pub score: f64,
    pub sample_size: u64,
    pub rob: f64,
    pub population: String,
    pub interventions: String,
    pub outcomes: String,
    pub punchline: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeOverrides {
    pub beam_size: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub alpha: Option<f64>,
}

impl DecodeOverrides {
    pub fn apply(&self, base: DecodeConfig) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size.unwrap_or(base.beam_size),
            min_len: self.min_len.unwrap_or(base.min_len),
            max_len: self.max_len.unwrap_or(base.max_len),
            alpha: self.alpha.unwrap_or(base.alpha),
        }
    }
}

fn default_model() -> Architecture {
    Architecture::Multihead
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizeRequest {
    pub trial_ids: Option<Vec<String>>,
    pub query: Option<QueryBody>,
    pub k: Option<usize>,
    #[serde(default = "default_model")]
    pub model: Architecture,
    pub decode: Option<DecodeOverrides>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizeResponse {
    pub summary: String,
    pub tokens: Vec<TokenLabel>,
    pub trial_ids: Vec<String>,
    pub model: Architecture,
    pub warning: String,
    pub request_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfillRequest {
    pub template_id: String,
    pub trial_ids: Option<Vec<String>>,
    pub query: Option<QueryBody>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillToken {
    pub text: String,
    pub aspect: Option<Aspect>,
    pub confidence: Option<f64>,
    pub literal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillSpan {
    pub aspect: Aspect,
    pub start: usize,
    pub end: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillResponse {
    pub template_id: String,
    pub direction: Direction,
    pub summary: String,
    pub tokens: Vec<InfillToken>,
    pub spans: Vec<InfillSpan>,
    pub trial_ids: Vec<String>,
    pub model: Architecture,
    pub warning: String,
    pub request_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceRequest {
    pub request_hash: String,
    pub token_index: usize,
}

/// What a provenance lookup needs from an earlier response.
#[derive(Debug, Clone)]
struct Cached {
    body: String,
    labels: Vec<TokenLabel>,
    literal: Vec<bool>,
    records: Vec<TrialRecord>,
}

pub struct LoadedModel {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
}

/// Immutable store, templates and models plus the response cache.
pub struct Engine {
    store: TrialStore,
    templates: TemplateCatalog,
    models: BTreeMap<&'static str, LoadedModel>,
    decode: DecodeConfig,
    infill_opts: InfillOptions,
    cache: Mutex<LruCache<String, Cached>>,
}

fn arch_key(a: Architecture) -> &'static str {
    match a {
        Architecture::Baseline => "baseline",
        Architecture::Multihead => "multihead",
    }
}

impl Engine {
    pub fn new(store: TrialStore, templates: TemplateCatalog, models: Vec<LoadedModel>, cache_size: usize) -> Self {
        Self {
            store,
            templates,
            models: models
                .into_iter()
                .map(|m| (arch_key(m.model.architecture()), m))
                .collect(),
            decode: DecodeConfig::default(),
            infill_opts: InfillOptions::default(),
            cache: Mutex::new(LruCache::new(cache_size)),
        }
    }

    pub fn with_decode_config(mut self, cfg: DecodeConfig) -> Self {
        self.decode = cfg;
        self
    }

    pub fn store(&self) -> &TrialStore {
        &self.store
    }

    pub fn templates(&self) -> &TemplateCatalog {
        &self.templates
    }

    pub fn model(&self, arch: Architecture) -> Option<&LoadedModel> {
        self.models.get(arch_key(arch))
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn lookup(&self, key: &str) -> Option<Cached> {
        self.cache.lock().expect("cache lock").get(&key.to_string())
    }

    fn remember(&self, key: String, value: Cached) {
        self.cache.lock().expect("cache lock").put(key, value);
    }

    pub fn search(&self, req: &SearchRequest) -> Result<String, ApiError> {
        let hits = self.search_records(&req.query, req.k)?;
        let out: Vec<SearchHit> = hits
            .into_iter()
            .map(|r| SearchHit {
                id: r.id.clone(),
                title: r.title.clone(),
                score: r.score(),
                sample_size: r.sample_size,
                rob: r.rob,
                population: r.population.clone(),
                interventions: r.interventions.clone(),
                outcomes: r.outcomes.clone(),
                punchline: r.punchline.clone(),
            })
            .collect();
        Ok(to_json(&out))
    }

    fn search_records(&self, q: &QueryBody, k: Option<usize>) -> Result<Vec<&TrialRecord>, ApiError> {
        let query = q.to_query();
        if query.is_empty() {
            return Err(ApiError::bad_request("at least one search term is required"));
        }
        let k = k.unwrap_or(DEFAULT_TOP_K);
        if k == 0 {
            return Err(ApiError::bad_request("k must be at least 1"));
        }
        let hits = self
            .store
            .search(&query, &RetrievalConfig { k })
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(hits.into_iter().map(|h| h.record).collect())
    }

    fn select(
        &self,
        ids: &Option<Vec<String>>,
        query: &Option<QueryBody>,
        k: Option<usize>,
    ) -> Result<Vec<TrialRecord>, ApiError> {
        match (ids, query) {
            (Some(ids), None) => ids
                .iter()
                .map(|id| {
                    self.store
                        .get(id)
                        .cloned()
                        .ok_or_else(|| ApiError::not_found(format!("unknown trial id {id:?}")))
                })
                .collect(),
            (None, Some(q)) => Ok(self.search_records(q, k)?.into_iter().cloned().collect()),
            _ => Err(ApiError::bad_request("give exactly one of trial_ids and query")),
        }
    }

    fn loaded(&self, arch: Architecture) -> Result<&LoadedModel, ApiError> {
        self.model(arch)
            .ok_or_else(|| ApiError::not_found(format!("no {arch} model is loaded")))
    }

    fn bundle(&self, m: &LoadedModel, records: &[TrialRecord]) -> Result<AspectBundle, ApiError> {
        let refs: Vec<&TrialRecord> = records.iter().collect();
        let bundle = AspectBundle::from_records(&refs, &m.vocab, m.model.config().max_src_len);
        if bundle.is_empty() {
            return Err(ApiError::unprocessable("input bundle has no text for any aspect"));
        }
        Ok(bundle)
    }

    pub fn summarize(&self, req: &SummarizeRequest) -> Result<String, ApiError> {
        let records = self.select(&req.trial_ids, &req.query, req.k)?;
        let m = self.loaded(req.model)?;
        let limit = m.model.config().max_tgt_len;
        let base = DecodeConfig {
            max_len: self.decode.max_len.min(limit),
            ..self.decode
        };
        let cfg = req.decode.unwrap_or_default().apply(base);
        cfg.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        if cfg.max_len > limit {
            return Err(ApiError::bad_request(format!(
                "max_len {} exceeds the model limit of {limit}",
                cfg.max_len
            )));
        }
        let trial_ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        let hash = request_hash(&serde_json::json!({
            "kind": "summarize",
            "trial_ids": trial_ids,
            "model": req.model,
            "decode": cfg,
        }));
        if let Some(c) = self.lookup(&hash) {
            return Ok(c.body);
        }
        let bundle = self.bundle(m, &records)?;
        let session = Session::new(&m.model, &bundle).map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let out = decode(&session, &cfg).map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let words: Vec<String> = out
            .tokens
            .iter()
            .map(|&t| m.vocab.token(t).map(str::to_string))
            .collect::<Result<_, _>>()
            .map_err(|e| ApiError::new(500, e.to_string()))?;
        let labels = trace_summary(&out.trace, &words).map_err(|e| ApiError::new(500, e.to_string()))?;
        let summary = m.vocab.decode_plain(&out.tokens).map_err(|e| ApiError::new(500, e.to_string()))?;
        let body = to_json(&SummarizeResponse {
            summary,
            tokens: labels.clone(),
            trial_ids,
            model: req.model,
            warning: WARNING.to_string(),
            request_hash: hash.clone(),
        });
        self.remember(
            hash,
            Cached {
                body: body.clone(),
                literal: vec![false; labels.len()],
                labels,
                records,
            },
        );
        Ok(body)
    }

    pub fn infill(&self, req: &InfillRequest) -> Result<String, ApiError> {
        let template = self
            .templates
            .get(&req.template_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown template {:?}", req.template_id)))?;
        let records = self.select(&req.trial_ids, &req.query, req.k)?;
        let m = self.loaded(Architecture::Multihead)?;
        let trial_ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        let hash = request_hash(&serde_json::json!({
            "kind": "infill",
            "template": template,
            "trial_ids": trial_ids,
            "options": self.infill_opts,
        }));
        if let Some(c) = self.lookup(&hash) {
            return Ok(c.body);
        }
        let bundle = self.bundle(m, &records)?;
        let r = infill(&m.model, &m.vocab, template, &bundle, &self.infill_opts, None).map_err(|e| match e {
            InfillError::Unsupported(_) => ApiError::bad_request(e.to_string()),
            _ => ApiError::unprocessable(e.to_string()),
        })?;
        let mut labels = trace_summary(&r.trace, &r.words).map_err(|e| ApiError::new(500, e.to_string()))?;
        for (l, _) in labels.iter_mut().zip(&r.literal).filter(|(_, &lit)| lit) {
            l.aspect = None;
            l.confidence = None;
        }
        let tokens = labels
            .iter()
            .zip(&r.literal)
            .map(|(l, &literal)| InfillToken {
                text: l.text.clone(),
                aspect: l.aspect,
                confidence: l.confidence,
                literal,
            })
            .collect();
        let body = to_json(&InfillResponse {
            template_id: r.template_id.clone(),
            direction: r.direction,
            summary: r.text.clone(),
            tokens,
            spans: r
                .spans
                .iter()
                .map(|s| InfillSpan {
                    aspect: s.aspect,
                    start: s.start,
                    end: s.end,
                    truncated: s.truncated,
                })
                .collect(),
            trial_ids,
            model: Architecture::Multihead,
            warning: WARNING.to_string(),
            request_hash: hash.clone(),
        });
        self.remember(
            hash,
            Cached {
                body: body.clone(),
                labels,
                literal: r.literal,
                records,
            },
        );
        Ok(body)
    }

    pub fn templates_json(&self) -> String {
        to_json(&self.templates.list())
    }

    pub fn trial(&self, id: &str) -> Result<String, ApiError> {
        self.store
            .get(id)
            .map(to_json)
            .ok_or_else(|| ApiError::not_found(format!("unknown trial id {id:?}")))
    }

    pub fn provenance(&self, req: &ProvenanceRequest) -> Result<String, ApiError> {
        let c = self
            .lookup(&req.request_hash)
            .ok_or_else(|| ApiError::not_found("unknown or expired request hash"))?;
        let view = snippets_for_token(req.token_index, &c.labels, &c.literal, &c.records)
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        Ok(to_json(&view))
    }
}

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const TARGETS_FILE: &str = "targets.jsonl";
pub const TEMPLATES_FILE: &str = "templates.json";

pub fn checkpoint_file(arch: Architecture) -> String {
    format!("{arch}.ckpt")
}

/// Where an engine finds its inputs. Relative paths resolve against `data_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    pub trials: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub cache_size: usize,
    pub decode: DecodeConfig,
}

impl EngineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            trials: None,
            checkpoints: Vec::new(),
            cache_size: DEFAULT_CACHE_SIZE,
            decode: DecodeConfig::default(),
        }
    }

    pub fn resolve(&self, p: impl AsRef<Path>) -> PathBuf {
        self.data_dir.join(p)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("trials: {0}")]
    Store(#[from] StoreError),
    #[error("templates: {0}")]
    Templates(#[from] TemplateError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("two checkpoints for the {0} architecture")]
    DuplicateModel(Architecture),
}

/// Loads the store, the template catalog (built-ins plus `templates.json`
/// when present) and the checkpoints. Without explicit checkpoints every
/// `<architecture>.ckpt` in the data directory is picked up.
pub fn load_engine(cfg: &EngineConfig) -> Result<Engine, LoadError> {
    let trials = cfg.resolve(cfg.trials.as_deref().unwrap_or(Path::new(TRIALS_FILE)));
    let (store, _) = TrialStore::ingest(&trials)?;
    let extra = cfg.resolve(TEMPLATES_FILE);
    let templates = if extra.is_file() {
        TemplateCatalog::with_file(&extra)?
    } else {
        TemplateCatalog::builtin()
    };
    let paths: Vec<PathBuf> = if cfg.checkpoints.is_empty() {
        [Architecture::Baseline, Architecture::Multihead]
            .into_iter()
            .map(|a| cfg.resolve(checkpoint_file(a)))
            .filter(|p| p.is_file())
            .collect()
    } else {
        cfg.checkpoints.iter().map(|p| cfg.resolve(p)).collect()
    };
    let mut models: Vec<LoadedModel> = Vec::new();
    for path in paths {
        let (model, vocab) = checkpoint::load(&path).map_err(|source| LoadError::Checkpoint {
            path: path.clone(),
            source,
        })?;
        if models.iter().any(|m| m.model.architecture() == model.architecture()) {
            return Err(LoadError::DuplicateModel(model.architecture()));
        }
        models.push(LoadedModel { model, vocab });
    }
    Ok(Engine::new(store, templates, models, cfg.cache_size).with_decode_config(cfg.decode))
}

pub fn request_hash(key: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(to_json(key).as_bytes()))
}
