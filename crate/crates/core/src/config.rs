//! Resolved pipeline configuration.
//!
//! Sources are layered as defaults, then a `key = value` file, then explicit
//! overrides (command-line flags). The canonical rendering of the
//! experiment-defining keys is hashed; the hash names the output directory
//! and is stamped into every artifact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversation::TopicFormat;
use crate::index::RankingModel;
use crate::llm::{CompletionParams, DEFAULT_ENDPOINT, DEFAULT_MODEL};
use crate::metrics::{EvalConfig, Gain, Metric, MissingTopics};
use crate::prompt::TemplateId;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{origin}:{line}: expected `key = value`")]
    Syntax { origin: String, line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {message}")]
    Value {
        key: String,
        value: String,
        message: String,
    },
    #[error("{0} is required")]
    Missing(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RerankKind {
    Off,
    Identity,
    Overlap,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub topics: Option<PathBuf>,
    pub topic_format: Option<TopicFormat>,
    pub manual: Option<PathBuf>,
    /// Extra conversations used only as few-shot examples.
    pub examples: Option<PathBuf>,
    pub collection: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub templates: Vec<TemplateId>,
    pub answers_in_context: bool,
    pub backend: BackendKind,
    pub mock_fixture: Option<PathBuf>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub endpoint: String,
    pub seed: u64,
    pub ranking_model: RankingModel,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub k_first: usize,
    pub rerank: RerankKind,
    pub rerank_command: Option<String>,
    pub rerank_depth: usize,
    pub metrics: Vec<Metric>,
    pub rel_threshold: u32,
    pub max_grade: u32,
    pub gain: Gain,
    pub missing_topics: MissingTopics,
    pub alpha: f64,
    /// Bonferroni family size; 0 means the number of templates.
    pub m: usize,
    // Operational settings below do not change results and are not hashed.
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub transcript: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            topics: None,
            topic_format: None,
            manual: None,
            examples: None,
            collection: None,
            index: None,
            qrels: None,
            templates: TemplateId::ALL.to_vec(),
            answers_in_context: true,
            backend: BackendKind::Mock,
            mock_fixture: None,
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            max_tokens: 256,
            endpoint: DEFAULT_ENDPOINT.to_string(),
            seed: 13,
            ranking_model: RankingModel::Dph,
            bm25_k1: crate::index::BM25_K1,
            bm25_b: crate::index::BM25_B,
            k_first: 1000,
            rerank: RerankKind::Off,
            rerank_command: None,
            rerank_depth: 1000,
            metrics: Metric::DEFAULTS.to_vec(),
            rel_threshold: 1,
            max_grade: 2,
            gain: Gain::Linear,
            missing_topics: MissingTopics::Strict,
            alpha: 0.05,
            m: 0,
            out_dir: PathBuf::from("runs"),
            cache_dir: None,
            workers: 4,
            max_in_flight: 4,
            timeout_secs: 60,
            transcript: false,
        }
    }
}

/// Keys that define an experiment, in canonical order.
pub const HASHED_KEYS: &[&str] = &[
    "topics",
    "topic_format",
    "manual",
    "examples",
    "collection",
    "index",
    "qrels",
    "templates",
    "answers_in_context",
    "backend",
    "mock_fixture",
    "model",
    "temperature",
    "max_tokens",
    "endpoint",
    "seed",
    "ranking_model",
    "bm25_k1",
    "bm25_b",
    "k_first",
    "rerank",
    "rerank_command",
    "rerank_depth",
    "metrics",
    "rel_threshold",
    "max_grade",
    "gain",
    "missing_topics",
    "alpha",
    "m",
];

pub const OPERATIONAL_KEYS: &[&str] = &[
    "out_dir",
    "cache_dir",
    "workers",
    "max_in_flight",
    "timeout_secs",
    "transcript",
];

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn list<T, E: ToString>(v: &str, parse: impl Fn(&str) -> Result<T, E>) -> Result<Vec<T>, String> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("list is empty".into());
    }
    Ok(items)
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: ToString,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

fn boolean(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let result: Result<(), String> = (|| {
            match key {
                "topics" => self.topics = opt_path(v),
                "topic_format" => {
                    self.topic_format = match v {
                        "" | "auto" => None,
                        other => Some(other.parse()?),
                    }
                }
                "manual" => self.manual = opt_path(v),
                "examples" => self.examples = opt_path(v),
                "collection" => self.collection = opt_path(v),
                "index" => self.index = opt_path(v),
                "qrels" => self.qrels = opt_path(v),
                "templates" | "template" => self.templates = list(v, TemplateId::from_str)?,
                "answers_in_context" => self.answers_in_context = boolean(v)?,
                "backend" => {
                    self.backend = match v {
                        "mock" => BackendKind::Mock,
                        "http" => BackendKind::Http,
                        _ => return Err("expected mock or http".into()),
                    }
                }
                "mock_fixture" => self.mock_fixture = opt_path(v),
                "model" => {
                    if v.is_empty() {
                        return Err("empty model name".into());
                    }
                    self.model = v.to_string()
                }
                "temperature" => self.temperature = num(v)?,
                "max_tokens" => self.max_tokens = num(v)?,
                "endpoint" => self.endpoint = v.to_string(),
                "seed" => self.seed = num(v)?,
                "ranking_model" => self.ranking_model = v.parse()?,
                "bm25_k1" => self.bm25_k1 = num(v)?,
                "bm25_b" => {
                    self.bm25_b = num(v)?;
                    if !(0.0..=1.0).contains(&self.bm25_b) {
                        return Err("must lie in [0, 1]".into());
                    }
                }
                "k_first" => {
                    self.k_first = num(v)?;
                    if self.k_first == 0 {
                        return Err("must be positive".into());
                    }
                }
                "rerank" => {
                    self.rerank = match v {
                        "off" | "none" | "false" => RerankKind::Off,
                        "identity" => RerankKind::Identity,
                        "overlap" => RerankKind::Overlap,
                        "external" => RerankKind::External,
                        _ => return Err("expected off, identity, overlap or external".into()),
                    }
                }
                "rerank_command" => self.rerank_command = (!v.is_empty()).then(|| v.to_string()),
                "rerank_depth" => {
                    self.rerank_depth = num(v)?;
                    if !(1..=crate::rerank::MAX_CANDIDATES).contains(&self.rerank_depth) {
                        return Err(format!("must lie in 1..={}", crate::rerank::MAX_CANDIDATES));
                    }
                }
                "metrics" => self.metrics = list(v, Metric::from_str)?,
                "rel_threshold" => {
                    self.rel_threshold = num(v)?;
                    if self.rel_threshold == 0 {
                        return Err("must be at least 1".into());
                    }
                }
                "max_grade" => self.max_grade = num(v)?,
                "gain" => self.gain = v.parse()?,
                "missing_topics" => {
                    self.missing_topics = match v {
                        "strict" => MissingTopics::Strict,
                        "lenient" => MissingTopics::Lenient,
                        _ => return Err("expected strict or lenient".into()),
                    }
                }
                "alpha" => {
                    self.alpha = num(v)?;
                    if !(self.alpha > 0.0 && self.alpha < 1.0) {
                        return Err("must lie in (0, 1)".into());
                    }
                }
                "m" => self.m = num(v)?,
                "out_dir" => self.out_dir = PathBuf::from(v),
                "cache_dir" => self.cache_dir = opt_path(v),
                "workers" => {
                    self.workers = num(v)?;
                    if self.workers == 0 {
                        return Err("must be positive".into());
                    }
                }
                "max_in_flight" => {
                    self.max_in_flight = num(v)?;
                    if self.max_in_flight == 0 {
                        return Err("must be positive".into());
                    }
                }
                "timeout_secs" => self.timeout_secs = num(v)?,
                "transcript" => self.transcript = boolean(v)?,
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        result.map_err(|message| {
            if message.is_empty() {
                ConfigError::UnknownKey(key.to_string())
            } else {
                ConfigError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    message,
                }
            }
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
                origin: origin.to_string(),
                line: idx + 1,
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<(), ConfigError> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let join = |items: Vec<String>| items.join(",");
        Some(match key {
            "topics" => show_path(&self.topics),
            "topic_format" => match self.topic_format {
                None => "auto".into(),
                Some(TopicFormat::CastJson) => "cast-json".into(),
                Some(TopicFormat::Tsv) => "tsv".into(),
            },
            "manual" => show_path(&self.manual),
            "examples" => show_path(&self.examples),
            "collection" => show_path(&self.collection),
            "index" => show_path(&self.index),
            "qrels" => show_path(&self.qrels),
            "templates" => join(self.templates.iter().map(|t| t.as_str().to_string()).collect()),
            "answers_in_context" => self.answers_in_context.to_string(),
            "backend" => match self.backend {
                BackendKind::Mock => "mock".into(),
                BackendKind::Http => "http".into(),
            },
            "mock_fixture" => show_path(&self.mock_fixture),
            "model" => self.model.clone(),
            "temperature" => format!("{:?}", self.temperature),
            "max_tokens" => self.max_tokens.to_string(),
            "endpoint" => self.endpoint.clone(),
            "seed" => self.seed.to_string(),
            "ranking_model" => self.ranking_model.to_string(),
            "bm25_k1" => format!("{:?}", self.bm25_k1),
            "bm25_b" => format!("{:?}", self.bm25_b),
            "k_first" => self.k_first.to_string(),
            "rerank" => match self.rerank {
                RerankKind::Off => "off".into(),
                RerankKind::Identity => "identity".into(),
                RerankKind::Overlap => "overlap".into(),
                RerankKind::External => "external".into(),
            },
            "rerank_command" => self.rerank_command.clone().unwrap_or_default(),
            "rerank_depth" => self.rerank_depth.to_string(),
            "metrics" => join(self.metrics.iter().map(Metric::to_string).collect()),
            "rel_threshold" => self.rel_threshold.to_string(),
            "max_grade" => self.max_grade.to_string(),
            "gain" => self.gain.to_string(),
            "missing_topics" => match self.missing_topics {
                MissingTopics::Strict => "strict".into(),
                MissingTopics::Lenient => "lenient".into(),
            },
            "alpha" => format!("{:?}", self.alpha),
            "m" => self.m.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "cache_dir" => show_path(&self.cache_dir),
            "workers" => self.workers.to_string(),
            "max_in_flight" => self.max_in_flight.to_string(),
            "timeout_secs" => self.timeout_secs.to_string(),
            "transcript" => self.transcript.to_string(),
            _ => return None,
        })
    }

    fn render(&self, keys: &[&str]) -> String {
        let mut out = String::new();
        for k in keys {
            writeln!(out, "{k} = {}", self.get(k).expect("known key")).unwrap();
        }
        out
    }

    /// Experiment-defining keys in canonical order; the hash input.
    pub fn canonical_text(&self) -> String {
        self.render(HASHED_KEYS)
    }

    /// Every key, experiment keys first. Parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = self.canonical_text();
        out.push_str(&self.render(OPERATIONAL_KEYS));
        out
    }

    /// First 12 hex digits of the SHA-256 of [`Self::canonical_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("run-{}", self.hash()))
    }

    pub fn completion_params(&self) -> CompletionParams {
        CompletionParams {
            model_name: self.model.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_tokens,
            timeout: Duration::from_secs(self.timeout_secs),
        }
    }

    pub fn ranking(&self) -> RankingModel {
        match self.ranking_model {
            RankingModel::Dph => RankingModel::Dph,
            RankingModel::Bm25 { .. } => RankingModel::Bm25 {
                k1: self.bm25_k1,
                b: self.bm25_b,
            },
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            metrics: self.metrics.clone(),
            rel_threshold: self.rel_threshold,
            gain: self.gain,
            missing: self.missing_topics,
        }
    }

    /// Bonferroni family size actually used.
    pub fn family_size(&self) -> usize {
        if self.m == 0 {
            self.templates.len().max(1)
        } else {
            self.m
        }
    }

    pub fn topic_format_for(&self, path: &Path) -> TopicFormat {
        self.topic_format.unwrap_or_else(|| TopicFormat::from_path(path))
    }

    pub fn require_path(value: &Option<PathBuf>, name: &'static str) -> Result<PathBuf, ConfigError> {
        value.clone().ok_or(ConfigError::Missing(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = PipelineConfig::default();
        let mut back = PipelineConfig::default();
        back.seed = 99;
        back.apply_text(&cfg.to_text(), "mem").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.k_first, 1000);
        assert_eq!(cfg.seed, 13);
    }

    #[test]
    fn precedence_flags_over_file() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("# experiment\nseed = 7\nk_first = 10\n", "file").unwrap();
        cfg.apply_overrides([("seed", "21")]).unwrap();
        assert_eq!(cfg.seed, 21);
        assert_eq!(cfg.k_first, 10);
    }

    #[test]
    fn hash_ignores_operational_keys() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.set("out_dir", "/elsewhere").unwrap();
        b.set("workers", "1").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "14").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.set("colour", "red"), Err(ConfigError::UnknownKey("colour".into())));
        assert!(matches!(cfg.set("ranking_model", "tfidf"), Err(ConfigError::Value { .. })));
        assert!(matches!(cfg.set("alpha", "1.5"), Err(ConfigError::Value { .. })));
        assert!(matches!(
            cfg.apply_text("seed 7\n", "f"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }
}
