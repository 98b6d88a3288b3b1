//! Retrieval effectiveness: MRR, P@k, NDCG@k and R@k, per topic and mean.
//!
//! Binary metrics count a document as relevant when its grade reaches the
//! relevance threshold. MRR is taken over the full run depth. Topics are
//! evaluated in qrels order, so means do not depend on run topic order.

mod trec;

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use trec::{
    parse_qrels, parse_run, qrels_to_string, read_qrels, read_run, write_run, Qrels, Run, RunEntry,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid report {path}: {message}")]
    Report { path: String, message: String },
    #[error("invalid metric {0:?}")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Mrr,
    Precision(usize),
    Ndcg(usize),
    Recall(usize),
}

impl Metric {
    pub const DEFAULTS: [Metric; 4] = [
        Metric::Mrr,
        Metric::Precision(1),
        Metric::Ndcg(3),
        Metric::Recall(500),
    ];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Mrr => f.write_str("MRR"),
            Metric::Precision(k) => write!(f, "P@{k}"),
            Metric::Ndcg(k) => write!(f, "NDCG@{k}"),
            Metric::Recall(k) => write!(f, "R@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MetricsError::UnknownMetric(s.to_string());
        let upper = s.trim().to_ascii_uppercase();
        if upper == "MRR" {
            return Ok(Metric::Mrr);
        }
        let (name, k) = upper.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().ok().filter(|&k| k > 0).ok_or_else(bad)?;
        match name {
            "P" => Ok(Metric::Precision(k)),
            "NDCG" => Ok(Metric::Ndcg(k)),
            "R" => Ok(Metric::Recall(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `grade / log2(rank + 1)`
    Linear,
    /// `(2^grade - 1) / log2(rank + 1)`
    Exponential,
}

impl Gain {
    fn value(self, grade: u32) -> f64 {
        match self {
            Gain::Linear => f64::from(grade),
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
        }
    }
}

impl FromStr for Gain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Gain::Linear),
            "exponential" | "exp" => Ok(Gain::Exponential),
            other => Err(format!("unknown gain {other:?} (expected linear or exponential)")),
        }
    }
}

impl fmt::Display for Gain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gain::Linear => "linear",
            Gain::Exponential => "exponential",
        })
    }
}

/// What to do with judged topics that the run never retrieved for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingTopics {
    /// Score 0 on every metric.
    Strict,
    /// Leave them out of the means.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub rel_threshold: u32,
    pub gain: Gain,
    pub missing: MissingTopics,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::DEFAULTS.to_vec(),
            rel_threshold: 1,
            gain: Gain::Linear,
            missing: MissingTopics::Strict,
        }
    }
}

// Per-topic kernels. `judged` maps docno -> grade for one topic.

pub fn reciprocal_rank(ranking: &[RunEntry], judged: &IndexMap<String, u32>, threshold: u32) -> f64 {
    ranking
        .iter()
        .position(|e| judged.get(&e.docno).is_some_and(|&g| g >= threshold))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

pub fn precision(ranking: &[RunEntry], judged: &IndexMap<String, u32>, k: usize, threshold: u32) -> f64 {
    let hits = ranking
        .iter()
        .take(k)
        .filter(|e| judged.get(&e.docno).is_some_and(|&g| g >= threshold))
        .count();
    hits as f64 / k as f64
}

/// `None` when the topic has no relevant documents.
pub fn recall(ranking: &[RunEntry], judged: &IndexMap<String, u32>, k: usize, threshold: u32) -> Option<f64> {
    let relevant = judged.values().filter(|&&g| g >= threshold).count();
    if relevant == 0 {
        return None;
    }
    let hits = ranking
        .iter()
        .take(k)
        .filter(|e| judged.get(&e.docno).is_some_and(|&g| g >= threshold))
        .count();
    Some(hits as f64 / relevant as f64)
}

/// `None` when the ideal DCG is zero.
pub fn ndcg(ranking: &[RunEntry], judged: &IndexMap<String, u32>, k: usize, gain: Gain) -> Option<f64> {
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.value(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg <= 0.0 {
        return None;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| gain.value(judged.get(&e.docno).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    Some(dcg / idcg)
}

/// Per-topic values of one metric plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricFragment {
    pub metric: Metric,
    pub per_topic: IndexMap<String, f64>,
    pub mean: f64,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn fragment(
    metric: Metric,
    run: &Run,
    qrels: &Qrels,
    missing: MissingTopics,
    eligible: impl Fn(&IndexMap<String, u32>) -> bool,
    value: impl Fn(&[RunEntry], &IndexMap<String, u32>) -> Option<f64>,
) -> MetricFragment {
    let mut per_topic = IndexMap::new();
    for (qid, judged) in &qrels.judgments {
        if !eligible(judged) {
            log::debug!("{metric}: topic {qid} has nothing relevant; excluded");
            continue;
        }
        match run.entries.get(qid) {
            Some(ranking) => {
                if let Some(v) = value(ranking, judged) {
                    per_topic.insert(qid.clone(), v);
                }
            }
            None if missing == MissingTopics::Strict => {
                per_topic.insert(qid.clone(), 0.0);
            }
            None => {}
        }
    }
    let mean = mean(per_topic.values().copied());
    MetricFragment {
        metric,
        per_topic,
        mean,
    }
}

fn has_relevant(threshold: u32) -> impl Fn(&IndexMap<String, u32>) -> bool {
    move |judged| judged.values().any(|&g| g >= threshold)
}

pub fn mrr(run: &Run, qrels: &Qrels, threshold: u32, missing: MissingTopics) -> MetricFragment {
    fragment(Metric::Mrr, run, qrels, missing, has_relevant(threshold), |r, j| {
        Some(reciprocal_rank(r, j, threshold))
    })
}

pub fn precision_at(run: &Run, qrels: &Qrels, k: usize, threshold: u32, missing: MissingTopics) -> MetricFragment {
    fragment(Metric::Precision(k), run, qrels, missing, has_relevant(threshold), |r, j| {
        Some(precision(r, j, k, threshold))
    })
}

pub fn recall_at(run: &Run, qrels: &Qrels, k: usize, threshold: u32, missing: MissingTopics) -> MetricFragment {
    fragment(Metric::Recall(k), run, qrels, missing, has_relevant(threshold), |r, j| {
        recall(r, j, k, threshold)
    })
}

pub fn ndcg_at(run: &Run, qrels: &Qrels, k: usize, gain: Gain, missing: MissingTopics) -> MetricFragment {
    let frag = fragment(
        Metric::Ndcg(k),
        run,
        qrels,
        missing,
        |judged| judged.values().any(|&g| gain.value(g) > 0.0),
        |r, j| ndcg(r, j, k, gain),
    );
    let skipped = qrels.judgments.len() - frag.per_topic.len();
    if skipped > 0 && missing == MissingTopics::Strict {
        log::warn!("NDCG@{k}: {skipped} topics without positive judgments excluded");
    }
    frag
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_tag: String,
    /// Settings the report was computed under, echoed for provenance.
    pub header: IndexMap<String, String>,
    pub metrics: Vec<String>,
    pub per_topic: IndexMap<String, IndexMap<String, f64>>,
    pub means: IndexMap<String, f64>,
    pub topic_count: usize,
}

pub fn evaluate(run: &Run, qrels: &Qrels, config: &EvalConfig) -> MetricReport {
    let stray = run
        .entries
        .keys()
        .filter(|q| !qrels.judgments.contains_key(*q))
        .count();
    if stray > 0 {
        log::warn!("run {}: {stray} topics have no judgments and are excluded", run.tag);
    }
    let fragments: Vec<MetricFragment> = config
        .metrics
        .iter()
        .map(|&m| match m {
            Metric::Mrr => mrr(run, qrels, config.rel_threshold, config.missing),
            Metric::Precision(k) => precision_at(run, qrels, k, config.rel_threshold, config.missing),
            Metric::Ndcg(k) => ndcg_at(run, qrels, k, config.gain, config.missing),
            Metric::Recall(k) => recall_at(run, qrels, k, config.rel_threshold, config.missing),
        })
        .collect();

    let mut per_topic: IndexMap<String, IndexMap<String, f64>> = IndexMap::new();
    for qid in qrels.judgments.keys() {
        for frag in &fragments {
            if let Some(&v) = frag.per_topic.get(qid) {
                per_topic
                    .entry(qid.clone())
                    .or_default()
                    .insert(frag.metric.to_string(), v);
            }
        }
    }
    let mut header = IndexMap::new();
    header.insert("rel_threshold".to_string(), config.rel_threshold.to_string());
    header.insert("gain".to_string(), config.gain.to_string());
    header.insert(
        "missing_topics".to_string(),
        match config.missing {
            MissingTopics::Strict => "strict",
            MissingTopics::Lenient => "lenient",
        }
        .to_string(),
    );
    MetricReport {
        run_tag: run.tag.clone(),
        header,
        metrics: fragments.iter().map(|f| f.metric.to_string()).collect(),
        means: fragments
            .iter()
            .map(|f| (f.metric.to_string(), f.mean))
            .collect(),
        topic_count: per_topic.len(),
        per_topic,
    }
}

impl MetricReport {
    /// Per-topic values of `metric`, in report order.
    pub fn metric_vector(&self, metric: &str) -> IndexMap<String, f64> {
        self.per_topic
            .iter()
            .filter_map(|(q, m)| m.get(metric).map(|&v| (q.clone(), v)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, MetricsError> {
        serde_json::from_str(text).map_err(|e| MetricsError::Report {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Aligned plain-text table: header comments, one row per topic, then means.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# run: {}", self.run_tag).unwrap();
        for (k, v) in &self.header {
            writeln!(out, "# {k}: {v}").unwrap();
        }
        writeln!(out, "# topics: {}", self.topic_count).unwrap();
        let width = self
            .per_topic
            .keys()
            .map(String::len)
            .chain([4])
            .max()
            .unwrap_or(4);
        write!(out, "{:<width$}", "qid").unwrap();
        for m in &self.metrics {
            write!(out, "  {m:>8}").unwrap();
        }
        out.push('\n');
        for (qid, values) in &self.per_topic {
            write!(out, "{qid:<width$}").unwrap();
            for m in &self.metrics {
                match values.get(m) {
                    Some(v) => write!(out, "  {v:>8.4}").unwrap(),
                    None => write!(out, "  {:>8}", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        write!(out, "{:<width$}", "mean").unwrap();
        for m in &self.metrics {
            write!(out, "  {:>8.4}", self.means.get(m).copied().unwrap_or(0.0)).unwrap();
        }
        out.push('\n');
        out
    }
}
