//! Humor-commonality analysis: perspective prompt templates, pluggable
//! analysis backends (deterministic stub, replay cache, live HTTP), and
//! construction of the enhanced per-perspective input texts.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::tokenizer::{encode_pair, tokenize, TokenSequence, Vocab};

pub const TEMPLATE_VERSION: &str = "a1-v1";
pub const PLACEHOLDER: &str = "<用户文本>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Perspective {
    Semantic,
    Pragmatic,
    Syntactic,
    Cultural,
    Cognitive,
    Psychological,
}

pub const PERSPECTIVES: [Perspective; 6] = [
    Perspective::Semantic,
    Perspective::Pragmatic,
    Perspective::Syntactic,
    Perspective::Cultural,
    Perspective::Cognitive,
    Perspective::Psychological,
];

impl Perspective {
    pub fn name(&self) -> &'static str {
        match self {
            Perspective::Semantic => "semantic",
            Perspective::Pragmatic => "pragmatic",
            Perspective::Syntactic => "syntactic",
            Perspective::Cultural => "cultural",
            Perspective::Cognitive => "cognitive",
            Perspective::Psychological => "psychological",
        }
    }

    pub fn index(&self) -> usize {
        PERSPECTIVES.iter().position(|p| p == self).unwrap()
    }

    pub fn parse(s: &str) -> Option<Perspective> {
        PERSPECTIVES.iter().copied().find(|p| p.name() == s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("no prompt template registered for perspective {0}")]
    MissingTemplate(String),
    #[error("template for {perspective} must contain exactly one placeholder, found {count}")]
    BadTemplate { perspective: String, count: usize },
    #[error("replay cache miss for keys: {}", keys.join(", "))]
    CacheMiss { keys: Vec<String> },
    #[error("duplicate analysis cache key {0}")]
    DuplicateKey(String),
    #[error("missing analyses for perspectives: {}", missing.join(", "))]
    MissingPerspectives { missing: Vec<String> },
    #[error("analysis cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed cache line {line}: {reason}")]
    MalformedCache { line: usize, reason: String },
    #[error("live backend not configured: {0}")]
    LiveConfig(String),
    #[error("live backend request failed after retries: {0}")]
    LiveTransport(String),
}

/// One prompt template with a single user-text placeholder.
#[derive(Clone, Debug)]
pub struct PromptTemplate {
    pub perspective: Perspective,
    pub template: String,
    pub template_version: String,
}

impl PromptTemplate {
    pub fn render(&self, x: &str) -> String {
        self.template.replacen(PLACEHOLDER, x, 1)
    }
}

pub struct TemplateRegistry {
    templates: HashMap<Perspective, PromptTemplate>,
}

/// Strip comment lines (leading `#`) and surrounding whitespace.
fn parse_template_file(raw: &str) -> String {
    raw.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

impl TemplateRegistry {
    /// The six shipped perspective templates.
    pub fn builtin() -> Result<TemplateRegistry, AnalysisError> {
        let files: [(Perspective, &str); 6] = [
            (Perspective::Semantic, include_str!("../prompts/semantic.txt")),
            (Perspective::Pragmatic, include_str!("../prompts/pragmatic.txt")),
            (Perspective::Syntactic, include_str!("../prompts/syntactic.txt")),
            (Perspective::Cultural, include_str!("../prompts/cultural.txt")),
            (Perspective::Cognitive, include_str!("../prompts/cognitive.txt")),
            (
                Perspective::Psychological,
                include_str!("../prompts/psychological.txt"),
            ),
        ];
        let mut templates = HashMap::new();
        for (p, raw) in files {
            let template = parse_template_file(raw);
            let count = template.matches(PLACEHOLDER).count();
            if count != 1 {
                return Err(AnalysisError::BadTemplate {
                    perspective: p.name().to_string(),
                    count,
                });
            }
            templates.insert(
                p,
                PromptTemplate {
                    perspective: p,
                    template,
                    template_version: TEMPLATE_VERSION.to_string(),
                },
            );
        }
        Ok(TemplateRegistry { templates })
    }

    pub fn get(&self, p: Perspective) -> Result<&PromptTemplate, AnalysisError> {
        self.templates
            .get(&p)
            .ok_or_else(|| AnalysisError::MissingTemplate(p.name().to_string()))
    }

    pub fn render_prompt(&self, x: &str, p: Perspective) -> Result<String, AnalysisError> {
        Ok(self.get(p)?.render(x))
    }
}

pub fn text_hash(x: &str) -> String {
    let mut h = Sha256::new();
    h.update(x.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AnalysisRecord {
    pub text_hash: String,
    pub perspective: String,
    pub template_version: String,
    pub backend_id: String,
    pub analysis: String,
}

pub type CacheKey = (String, String, String); // (text_hash, perspective, template_version)

impl AnalysisRecord {
    pub fn key(&self) -> CacheKey {
        (
            self.text_hash.clone(),
            self.perspective.clone(),
            self.template_version.clone(),
        )
    }
}

/// Append-only JSONL analysis store with an in-memory key index.
pub struct AnalysisCache {
    path: Option<PathBuf>,
    index: HashMap<CacheKey, AnalysisRecord>,
}

impl AnalysisCache {
    pub fn in_memory() -> AnalysisCache {
        AnalysisCache {
            path: None,
            index: HashMap::new(),
        }
    }

    /// Open (or create) a cache file and load its records.
    pub fn open(path: &Path) -> Result<AnalysisCache, AnalysisError> {
        let mut index = HashMap::new();
        if path.exists() {
            let f = std::io::BufReader::new(std::fs::File::open(path)?);
            for (i, line) in f.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: AnalysisRecord =
                    serde_json::from_str(&line).map_err(|e| AnalysisError::MalformedCache {
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                let key = rec.key();
                if index.insert(key.clone(), rec).is_some() {
                    return Err(AnalysisError::DuplicateKey(format!("{key:?}")));
                }
            }
        }
        Ok(AnalysisCache {
            path: Some(path.to_path_buf()),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, key: &CacheKey) -> Option<&AnalysisRecord> {
        self.index.get(key)
    }

    /// Insert a new record; duplicate keys are rejected.
    pub fn insert(&mut self, rec: AnalysisRecord) -> Result<(), AnalysisError> {
        let key = rec.key();
        if self.index.contains_key(&key) {
            return Err(AnalysisError::DuplicateKey(format!("{key:?}")));
        }
        if let Some(path) = &self.path {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        self.index.insert(key, rec);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Stub,
    Replay,
    Live,
}

impl BackendKind {
    pub fn parse(s: &str) -> Option<BackendKind> {
        Some(match s {
            "stub" => BackendKind::Stub,
            "replay" => BackendKind::Replay,
            "live" => BackendKind::Live,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackendKind::Stub => "stub",
            BackendKind::Replay => "replay",
            BackendKind::Live => "live",
        }
    }
}

/// Endpoint configuration for the live backend, read from the environment.
#[derive(Clone, Debug)]
pub struct LiveConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub timeout_secs: u64,
}

impl LiveConfig {
    pub fn from_env() -> Result<LiveConfig, AnalysisError> {
        let endpoint = std::env::var("CIHR_LLM_ENDPOINT")
            .map_err(|_| AnalysisError::LiveConfig("CIHR_LLM_ENDPOINT unset".into()))?;
        let token = std::env::var("CIHR_LLM_TOKEN").ok();
        let timeout_secs = std::env::var("CIHR_LLM_TIMEOUT_SECS")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(30);
        Ok(LiveConfig {
            endpoint,
            token,
            timeout_secs,
        })
    }
}

/// Deterministic stand-in analysis: a fixed-form sentence carrying the
/// perspective name and the leading tokens of the text, so synthetic
/// markers survive into the analysis span.
pub fn stub_analysis(x: &str, p: Perspective) -> String {
    let toks = tokenize(x);
    let salient: Vec<&str> = toks.iter().take(12).map(|s| s.as_str()).collect();
    format!(
        "from the {} perspective the text centers on: {}",
        p.name(),
        salient.join(" ")
    )
}

pub struct Analyzer {
    pub backend: BackendKind,
    pub cache: AnalysisCache,
    pub templates: TemplateRegistry,
    live: Option<LiveConfig>,
}

impl Analyzer {
    pub fn new(backend: BackendKind, cache: AnalysisCache) -> Result<Analyzer, AnalysisError> {
        let live = if backend == BackendKind::Live {
            Some(LiveConfig::from_env()?)
        } else {
            None
        };
        Ok(Analyzer {
            backend,
            cache,
            templates: TemplateRegistry::builtin()?,
            live,
        })
    }

    pub fn key_for(x: &str, p: Perspective) -> CacheKey {
        (
            text_hash(x),
            p.name().to_string(),
            TEMPLATE_VERSION.to_string(),
        )
    }

    /// Obtain one perspective analysis through the configured backend.
    /// Stub and live results are written through to the cache; replay
    /// requires a hit.
    pub fn analyze(&mut self, x: &str, p: Perspective) -> Result<AnalysisRecord, AnalysisError> {
        let key = Self::key_for(x, p);
        if let Some(rec) = self.cache.get(&key) {
            return Ok(rec.clone());
        }
        match self.backend {
            BackendKind::Replay => Err(AnalysisError::CacheMiss {
                keys: vec![format!("{key:?}")],
            }),
            BackendKind::Stub => {
                let rec = AnalysisRecord {
                    text_hash: key.0,
                    perspective: key.1,
                    template_version: key.2,
                    backend_id: "stub-v1".to_string(),
                    analysis: stub_analysis(x, p),
                };
                self.cache.insert(rec.clone())?;
                Ok(rec)
            }
            BackendKind::Live => {
                let cfg = self
                    .live
                    .as_ref()
                    .expect("live backend always carries a config");
                let prompt = self.templates.render_prompt(x, p)?;
                let analysis = live_request(cfg, &prompt)?;
                let rec = AnalysisRecord {
                    text_hash: key.0,
                    perspective: key.1,
                    template_version: key.2,
                    backend_id: format!("live:{}", cfg.endpoint),
                    analysis,
                };
                self.cache.insert(rec.clone())?;
                Ok(rec)
            }
        }
    }

    /// All six perspective analyses for one text, in perspective order.
    pub fn analyze_all(&mut self, x: &str) -> Result<Vec<AnalysisRecord>, AnalysisError> {
        PERSPECTIVES.iter().map(|&p| self.analyze(x, p)).collect()
    }
}

/// POST `{"prompt": ...}` to the endpoint, expect `{"analysis": ...}`.
/// Capped exponential backoff: 3 attempts at 0.5 s, 1 s, 2 s.
fn live_request(cfg: &LiveConfig, prompt: &str) -> Result<String, AnalysisError> {
    let body = serde_json::json!({ "prompt": prompt }).to_string();
    let mut delay = std::time::Duration::from_millis(500);
    let mut last_err = String::new();
    for attempt in 0..3 {
        if attempt > 0 {
            std::thread::sleep(delay);
            delay *= 2;
        }
        let mut req = ureq::post(&cfg.endpoint)
            .timeout(std::time::Duration::from_secs(cfg.timeout_secs))
            .set("content-type", "application/json");
        if let Some(token) = &cfg.token {
            req = req.set("authorization", &format!("Bearer {token}"));
        }
        match req.send_string(&body) {
            Ok(resp) => {
                let text = resp
                    .into_string()
                    .map_err(|e| AnalysisError::LiveTransport(e.to_string()))?;
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| AnalysisError::LiveTransport(e.to_string()))?;
                return v["analysis"]
                    .as_str()
                    .map(|s| s.to_string())
                    .ok_or_else(|| {
                        AnalysisError::LiveTransport("response lacks `analysis` field".into())
                    });
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(AnalysisError::LiveTransport(last_err))
}

/// Build the N_a enhanced token sequences for one text. `n_a` is 6 (the
/// perspective analyses) or 7 (plus a raw-text view with no analysis
/// span); output index i corresponds to perspective index i.
pub fn build_enhanced_texts(
    vocab: &Vocab,
    x: &str,
    records: &[AnalysisRecord],
    n_a: usize,
    max_len: usize,
) -> Result<Vec<TokenSequence>, AnalysisError> {
    assert!(n_a == 6 || n_a == 7, "n_a must be 6 or 7");
    let mut by_perspective: HashMap<&str, &AnalysisRecord> = HashMap::new();
    for rec in records {
        by_perspective.insert(rec.perspective.as_str(), rec);
    }
    let missing: Vec<String> = PERSPECTIVES
        .iter()
        .filter(|p| !by_perspective.contains_key(p.name()))
        .map(|p| p.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(AnalysisError::MissingPerspectives { missing });
    }
    let mut out = Vec::with_capacity(n_a);
    for p in PERSPECTIVES {
        let rec = by_perspective[p.name()];
        out.push(encode_pair(vocab, x, Some(&rec.analysis), max_len));
    }
    if n_a == 7 {
        out.push(encode_pair(vocab, x, None, max_len));
    }
    Ok(out)
}

/// The single raw-text view used by the no-HC ablation.
pub fn raw_text_view(vocab: &Vocab, x: &str, max_len: usize) -> Vec<TokenSequence> {
    vec![encode_pair(vocab, x, None, max_len)]
}
