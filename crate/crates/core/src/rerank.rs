//! Second-stage reranking of first-stage candidates.
//!
//! Rerankers return one optional score per candidate. A missing or
//! non-finite score marks a failed candidate: it gets `-inf` and sinks to
//! the bottom instead of aborting the query.

use std::collections::{HashMap, HashSet};
use std::io::{self, Write};
use std::process::{Command, Stdio};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{Analyzer, ScoredDoc};

pub const MAX_CANDIDATES: usize = 1000;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("no candidates to rerank")]
    NoCandidates,
    #[error("{0} candidates exceed the limit of {MAX_CANDIDATES}")]
    TooManyCandidates(usize),
    #[error("query {0:?} has no terms after analysis")]
    EmptyQuery(String),
    #[error("cannot run reranker {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: io::Error,
    },
    #[error("reranker exited with {status}: {stderr}")]
    ExitStatus { status: String, stderr: String },
    #[error("reranker output line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("reranker returned no score for: {}", missing.join(", "))]
    Coverage { missing: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub docno: String,
    pub first_stage_score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankInput {
    pub qid: String,
    pub query_text: String,
    /// In first-stage order.
    pub candidates: Vec<Candidate>,
}

pub trait Reranker: Send + Sync {
    fn name(&self) -> &str;

    /// One entry per candidate, in input order; `None` marks a failure.
    fn score(&self, input: &RerankInput) -> Result<Vec<Option<f64>>, RerankError>;
}

/// Reorders candidates by reranker score, descending. Ties keep first-stage
/// order, then fall back to docno.
pub fn rerank(input: &RerankInput, reranker: &dyn Reranker) -> Result<Vec<ScoredDoc>, RerankError> {
    if input.candidates.is_empty() {
        return Err(RerankError::NoCandidates);
    }
    if input.candidates.len() > MAX_CANDIDATES {
        return Err(RerankError::TooManyCandidates(input.candidates.len()));
    }
    let scores = reranker.score(input)?;
    if scores.len() != input.candidates.len() {
        return Err(RerankError::Coverage {
            missing: input.candidates[scores.len().min(input.candidates.len())..]
                .iter()
                .map(|c| c.docno.clone())
                .collect(),
        });
    }
    let mut order: Vec<(usize, f64)> = scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| match s.filter(|v| v.is_finite()) {
            Some(v) => (i, v),
            None => {
                log::warn!(
                    "query {}: reranker failed on {}; sinking it",
                    input.qid,
                    input.candidates[i].docno
                );
                (i, f64::NEG_INFINITY)
            }
        })
        .collect();
    order.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)).then_with(|| {
            input.candidates[a.0]
                .docno
                .cmp(&input.candidates[b.0].docno)
        })
    });
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(rank, (i, score))| ScoredDoc {
            docno: input.candidates[i].docno.clone(),
            score,
            rank: rank as u32 + 1,
        })
        .collect())
}

/// Keeps the first-stage scores.
pub struct IdentityReranker;

impl Reranker for IdentityReranker {
    fn name(&self) -> &str {
        "identity"
    }

    fn score(&self, input: &RerankInput) -> Result<Vec<Option<f64>>, RerankError> {
        Ok(input
            .candidates
            .iter()
            .map(|c| Some(c.first_stage_score))
            .collect())
    }
}

/// Fraction of unique analysed query terms present in the passage.
pub fn overlap_score(analyzer: &Analyzer, query: &str, passage: &str) -> Result<f64, RerankError> {
    let query_terms: HashSet<String> = analyzer.tokenize(query).into_iter().collect();
    if query_terms.is_empty() {
        return Err(RerankError::EmptyQuery(query.to_string()));
    }
    let passage_terms: HashSet<String> = analyzer.tokenize(passage).into_iter().collect();
    let present = query_terms.intersection(&passage_terms).count();
    Ok(present as f64 / query_terms.len() as f64)
}

/// Deterministic lexical stand-in for a neural cross-encoder.
#[derive(Default)]
pub struct OverlapReranker {
    analyzer: Analyzer,
}

impl OverlapReranker {
    pub fn new(analyzer: Analyzer) -> Self {
        Self { analyzer }
    }
}

impl Reranker for OverlapReranker {
    fn name(&self) -> &str {
        "overlap"
    }

    fn score(&self, input: &RerankInput) -> Result<Vec<Option<f64>>, RerankError> {
        input
            .candidates
            .iter()
            .map(|c| overlap_score(&self.analyzer, &input.query_text, &c.text).map(Some))
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct ExchangeRequest<'a> {
    qid: &'a str,
    docno: &'a str,
    query: &'a str,
    text: &'a str,
    first_stage_score: f64,
    first_stage_rank: usize,
}

#[derive(Debug, Deserialize)]
struct ExchangeReply {
    qid: String,
    docno: String,
    score: Option<f64>,
}

/// Sends candidates to an external scorer as JSON lines on stdin and reads
/// `{qid, docno, score}` lines back from stdout. A `null` score marks a
/// failed candidate.
pub fn external_reranker_exchange(
    command: &str,
    input: &RerankInput,
) -> Result<Vec<Option<f64>>, RerankError> {
    let mut payload = Vec::new();
    for (i, c) in input.candidates.iter().enumerate() {
        let line = ExchangeRequest {
            qid: &input.qid,
            docno: &c.docno,
            query: &input.query_text,
            text: &c.text,
            first_stage_score: c.first_stage_score,
            first_stage_rank: i + 1,
        };
        serde_json::to_writer(&mut payload, &line).expect("request serializes");
        payload.push(b'\n');
    }

    let spawn_err = |source| RerankError::Spawn {
        command: command.to_string(),
        source,
    };
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(spawn_err)?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    // Writer thread: the child may start answering before reading everything.
    let writer = thread::spawn(move || {
        let _ = stdin.write_all(&payload);
    });
    let output = child.wait_with_output().map_err(spawn_err)?;
    let _ = writer.join();
    if !output.status.success() {
        return Err(RerankError::ExitStatus {
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }

    let position: HashMap<&str, usize> = input
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.docno.as_str(), i))
        .collect();
    let mut scores: Vec<Option<Option<f64>>> = vec![None; input.candidates.len()];
    let stdout = String::from_utf8_lossy(&output.stdout);
    for (idx, line) in stdout.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| RerankError::Malformed {
            line: idx + 1,
            message,
        };
        let reply: ExchangeReply =
            serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        if reply.qid != input.qid {
            return Err(malformed(format!("unexpected qid {:?}", reply.qid)));
        }
        let &i = position
            .get(reply.docno.as_str())
            .ok_or_else(|| malformed(format!("unknown docno {:?}", reply.docno)))?;
        if scores[i].replace(reply.score).is_some() {
            return Err(malformed(format!("duplicate docno {:?}", reply.docno)));
        }
    }
    let missing: Vec<String> = scores
        .iter()
        .zip(&input.candidates)
        .filter(|(s, _)| s.is_none())
        .map(|(_, c)| c.docno.clone())
        .collect();
    if !missing.is_empty() {
        return Err(RerankError::Coverage { missing });
    }
    Ok(scores.into_iter().map(|s| s.flatten()).collect())
}

/// Runs a shell command per query through [`external_reranker_exchange`].
pub struct ExternalReranker {
    command: String,
}

impl ExternalReranker {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
        }
    }
}

impl Reranker for ExternalReranker {
    fn name(&self) -> &str {
        "external"
    }

    fn score(&self, input: &RerankInput) -> Result<Vec<Option<f64>>, RerankError> {
        external_reranker_exchange(&self.command, input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(docs: &[(&str, f64, &str)]) -> RerankInput {
        RerankInput {
            qid: "31_1".into(),
            query_text: "throat cancer".into(),
            candidates: docs
                .iter()
                .map(|(d, s, t)| Candidate {
                    docno: d.to_string(),
                    first_stage_score: *s,
                    text: t.to_string(),
                })
                .collect(),
        }
    }

    struct Fixed(Vec<Option<f64>>);

    impl Reranker for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn score(&self, _: &RerankInput) -> Result<Vec<Option<f64>>, RerankError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn identity_preserves_order() {
        let inp = input(&[("c", 3.0, ""), ("a", 2.0, ""), ("b", 2.0, "")]);
        let out = rerank(&inp, &IdentityReranker).unwrap();
        let docs: Vec<&str> = out.iter().map(|d| d.docno.as_str()).collect();
        assert_eq!(docs, vec!["c", "a", "b"]);
    }

    #[test]
    fn overlap_prefers_full_match() {
        let inp = input(&[("B", 9.0, "lung cancer facts"), ("A", 1.0, "throat cancer facts")]);
        let out = rerank(&inp, &OverlapReranker::default()).unwrap();
        assert_eq!(out[0].docno, "A");
        assert_eq!(out[0].score, 1.0);
        assert_eq!(out[1].score, 0.5);
    }

    #[test]
    fn overlap_values() {
        let a = Analyzer::default();
        assert_eq!(overlap_score(&a, "throat cancer", "throat cancer").unwrap(), 1.0);
        assert_eq!(overlap_score(&a, "throat cancer", "dogs cats").unwrap(), 0.0);
        let s = overlap_score(&a, "alpha beta gamma", "alpha gamma delta").unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(overlap_score(&a, "the of", "x"), Err(RerankError::EmptyQuery(_))));
        let once = overlap_score(&a, "throat cancer lung", "throat cancer").unwrap();
        let twice = overlap_score(&a, "throat cancer lung", "throat cancer throat cancer").unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn failed_candidates_sink() {
        let inp = input(&[("a", 1.0, ""), ("b", 1.0, ""), ("c", 1.0, "")]);
        let out = rerank(&inp, &Fixed(vec![None, Some(0.1), Some(f64::NAN)])).unwrap();
        let docs: Vec<&str> = out.iter().map(|d| d.docno.as_str()).collect();
        assert_eq!(docs, vec!["b", "a", "c"]);
        assert_eq!(out[1].score, f64::NEG_INFINITY);
    }

    #[test]
    fn empty_and_oversized_inputs() {
        assert!(matches!(rerank(&input(&[]), &IdentityReranker), Err(RerankError::NoCandidates)));
        let many: Vec<(String, f64)> = (0..1001).map(|i| (format!("d{i}"), 0.0)).collect();
        let big = RerankInput {
            qid: "q".into(),
            query_text: "x".into(),
            candidates: many
                .into_iter()
                .map(|(d, s)| Candidate { docno: d, first_stage_score: s, text: String::new() })
                .collect(),
        };
        assert!(matches!(rerank(&big, &IdentityReranker), Err(RerankError::TooManyCandidates(1001))));
    }
}
