//! TREC run and qrels files.
//!
//! Run lines are `qid Q0 docno rank score tag`; qrels lines are
//! `qid 0 docno grade`. Scores are written with six decimals.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::MetricsError;
use crate::index::ScoredDoc;

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub docno: String,
    pub rank: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Run {
    pub tag: String,
    pub entries: IndexMap<String, Vec<RunEntry>>,
}

impl Run {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            entries: IndexMap::new(),
        }
    }

    /// Adds a ranked list for `qid`; the list must already satisfy the
    /// ordering invariant (as produced by search and rerank).
    pub fn insert(&mut self, qid: impl Into<String>, docs: &[ScoredDoc]) {
        let list = docs
            .iter()
            .map(|d| RunEntry {
                docno: d.docno.clone(),
                rank: d.rank,
                score: d.score,
            })
            .collect();
        self.entries.insert(qid.into(), list);
    }

    pub fn ranking(&self, qid: &str) -> &[RunEntry] {
        self.entries.get(qid).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn topic_count(&self) -> usize {
        self.entries.len()
    }

    /// Orders each topic by score descending, then by original rank and
    /// docno, and renumbers ranks `1..n`.
    pub fn normalize(&mut self) {
        for list in self.entries.values_mut() {
            list.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.rank.cmp(&b.rank))
                    .then_with(|| a.docno.cmp(&b.docno))
            });
            for (i, e) in list.iter_mut().enumerate() {
                e.rank = i as u32 + 1;
            }
        }
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (qid, list) in &self.entries {
            for e in list {
                writeln!(out, "{qid} Q0 {} {} {:.6} {}", e.docno, e.rank, e.score, self.tag)
                    .expect("string write");
            }
        }
        out
    }
}

fn io_error(path: &Path, source: std::io::Error) -> MetricsError {
    MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn parse_run(text: &str, origin: &str) -> Result<Run, MetricsError> {
    let mut run = Run::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| MetricsError::Line {
            path: origin.to_string(),
            line: idx + 1,
            message,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(err(format!("expected 6 columns, found {}", cols.len())));
        }
        let rank: u32 = cols[3]
            .parse()
            .map_err(|_| err(format!("rank {:?} is not a non-negative integer", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| err(format!("score {:?} is not a number", cols[4])))?;
        if score.is_nan() {
            return Err(err("score is NaN".into()));
        }
        if run.tag.is_empty() {
            run.tag = cols[5].to_string();
        } else if run.tag != cols[5] {
            log::warn!("{origin}:{}: tag {:?} differs from {:?}", idx + 1, cols[5], run.tag);
        }
        if !seen.insert((cols[0].to_string(), cols[2].to_string())) {
            return Err(err(format!("duplicate docno {} for topic {}", cols[2], cols[0])));
        }
        run.entries.entry(cols[0].to_string()).or_default().push(RunEntry {
            docno: cols[2].to_string(),
            rank,
            score,
        });
    }
    run.normalize();
    Ok(run)
}

pub fn read_run(path: &Path) -> Result<Run, MetricsError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_run(&text, &path.display().to_string())
}

pub fn write_run(run: &Run, path: &Path) -> Result<(), MetricsError> {
    fs::write(path, run.to_trec_string()).map_err(|e| io_error(path, e))
}

/// Graded judgments per topic, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Qrels {
    pub judgments: IndexMap<String, IndexMap<String, u32>>,
}

impl Qrels {
    pub fn grade(&self, qid: &str, docno: &str) -> u32 {
        self.judgments
            .get(qid)
            .and_then(|j| j.get(docno))
            .copied()
            .unwrap_or(0)
    }

    pub fn topic(&self, qid: &str) -> Option<&IndexMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn insert(&mut self, qid: impl Into<String>, docno: impl Into<String>, grade: u32) {
        self.judgments
            .entry(qid.into())
            .or_default()
            .insert(docno.into(), grade);
    }
}

/// Grades above `max_grade` are accepted with a warning.
pub fn parse_qrels(text: &str, origin: &str, max_grade: u32) -> Result<Qrels, MetricsError> {
    let mut qrels = Qrels::default();
    let mut out_of_scale = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| MetricsError::Line {
            path: origin.to_string(),
            line: idx + 1,
            message,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", cols.len())));
        }
        let grade: u32 = cols[3]
            .parse()
            .map_err(|_| err(format!("grade {:?} is not a non-negative integer", cols[3])))?;
        if grade > max_grade {
            out_of_scale += 1;
        }
        let topic = qrels.judgments.entry(cols[0].to_string()).or_default();
        if topic.insert(cols[2].to_string(), grade).is_some() {
            return Err(err(format!("duplicate judgment for {} {}", cols[0], cols[2])));
        }
    }
    if out_of_scale > 0 {
        log::warn!("{origin}: {out_of_scale} grades exceed the scale maximum {max_grade}");
    }
    Ok(qrels)
}

pub fn read_qrels(path: &Path, max_grade: u32) -> Result<Qrels, MetricsError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_qrels(&text, &path.display().to_string(), max_grade)
}

pub fn qrels_to_string(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (qid, docs) in &qrels.judgments {
        for (docno, grade) in docs {
            writeln!(out, "{qid} 0 {docno} {grade}").expect("string write");
        }
    }
    out
}
