//! First-stage lexical retrieval: analysis, inverted index, DPH/BM25 search.

mod analyzer;
pub mod porter;
mod scoring;
mod store;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use analyzer::{tokenize, Analyzer};
pub use scoring::{score_bm25, score_dph, RankingModel, BM25_B, BM25_K1};
pub use store::{INDEX_MAGIC, INDEX_VERSION};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate docno {0:?}")]
    DuplicateDocno(String),
    #[error("empty docno")]
    EmptyDocno,
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub docno: String,
    pub text: String,
}

impl Passage {
    pub fn new(docno: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            docno: docno.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TermEntry {
    pub collection_tf: u64,
    pub postings: Vec<Posting>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub docno: String,
    pub score: f64,
    pub rank: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InvertedIndex {
    docnos: Vec<String>,
    doc_lengths: Vec<u32>,
    terms: BTreeMap<String, TermEntry>,
    total_length: u64,
}

impl InvertedIndex {
    pub fn num_docs(&self) -> usize {
        self.docnos.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.docnos.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.docnos.len() as f64
        }
    }

    pub fn docno(&self, doc: u32) -> &str {
        &self.docnos[doc as usize]
    }

    pub fn doc_length(&self, doc: u32) -> u32 {
        self.doc_lengths[doc as usize]
    }

    pub fn term(&self, term: &str) -> Option<&TermEntry> {
        self.terms.get(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &TermEntry)> {
        self.terms.iter().map(|(t, e)| (t.as_str(), e))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Per-term weight for a document under `model`.
    pub fn term_weight(&self, model: RankingModel, entry: &TermEntry, tf: u32, doc: u32, qtf: u32) -> f64 {
        let doclen = f64::from(self.doc_length(doc));
        let n = self.num_docs() as f64;
        let avgdl = self.avg_doc_len();
        match model {
            RankingModel::Dph => score_dph(
                f64::from(tf),
                doclen,
                entry.collection_tf as f64,
                n,
                avgdl,
                f64::from(qtf),
            ),
            RankingModel::Bm25 { k1, b } => {
                f64::from(qtf)
                    * score_bm25(
                        f64::from(tf),
                        doclen,
                        entry.postings.len() as f64,
                        n,
                        avgdl,
                        k1,
                        b,
                    )
            }
        }
    }

    /// Ranks documents matching at least one query term. Scores sum the
    /// per-term weights over unique query terms in lexicographic order;
    /// ties go to the smaller docno.
    pub fn search(
        &self,
        analyzer: &Analyzer,
        query: &str,
        k: usize,
        model: RankingModel,
    ) -> Vec<ScoredDoc> {
        let mut qtf: BTreeMap<String, u32> = BTreeMap::new();
        for token in analyzer.tokenize(query) {
            *qtf.entry(token).or_default() += 1;
        }
        if qtf.is_empty() {
            log::warn!("query {query:?} has no terms after analysis");
            return Vec::new();
        }
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for (term, &count) in &qtf {
            let Some(entry) = self.terms.get(term) else {
                continue;
            };
            for p in &entry.postings {
                *acc.entry(p.doc).or_insert(0.0) += self.term_weight(model, entry, p.tf, p.doc, count);
            }
        }
        let mut hits: Vec<(u32, f64)> = acc.into_iter().collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docno(a.0).cmp(self.docno(b.0)))
        });
        hits.truncate(k);
        hits.into_iter()
            .enumerate()
            .map(|(i, (doc, score))| ScoredDoc {
                docno: self.docno(doc).to_string(),
                score,
                rank: i as u32 + 1,
            })
            .collect()
    }

    /// Checks every structural invariant; used after loading from disk.
    pub fn validate(&self) -> Result<(), IndexError> {
        let corrupt = |m: String| Err(IndexError::Corrupt(m));
        if self.docnos.len() != self.doc_lengths.len() {
            return corrupt("docno and length tables differ in size".into());
        }
        let total: u64 = self.doc_lengths.iter().map(|&l| u64::from(l)).sum();
        if total != self.total_length {
            return corrupt("total length mismatch".into());
        }
        let mut seen = HashSet::new();
        for d in &self.docnos {
            if d.is_empty() || !seen.insert(d.as_str()) {
                return corrupt(format!("bad or duplicate docno {d:?}"));
            }
        }
        for (term, entry) in &self.terms {
            let mut sum = 0u64;
            let mut prev: Option<u32> = None;
            for p in &entry.postings {
                if prev.is_some_and(|q| q >= p.doc) {
                    return corrupt(format!("postings of {term:?} not strictly sorted"));
                }
                let len = *self
                    .doc_lengths
                    .get(p.doc as usize)
                    .ok_or_else(|| IndexError::Corrupt(format!("posting beyond last doc in {term:?}")))?;
                if p.tf == 0 || p.tf > len {
                    return corrupt(format!("tf {} out of range in {term:?}", p.tf));
                }
                sum += u64::from(p.tf);
                prev = Some(p.doc);
            }
            if entry.postings.is_empty() || sum != entry.collection_tf {
                return corrupt(format!("collection frequency mismatch for {term:?}"));
            }
        }
        Ok(())
    }
}

/// Single-pass index construction over a passage stream.
pub struct IndexBuilder<'a> {
    analyzer: &'a Analyzer,
    index: InvertedIndex,
    seen: HashSet<String>,
}

impl<'a> IndexBuilder<'a> {
    pub fn new(analyzer: &'a Analyzer) -> Self {
        Self {
            analyzer,
            index: InvertedIndex::default(),
            seen: HashSet::new(),
        }
    }

    pub fn add(&mut self, passage: &Passage) -> Result<(), IndexError> {
        if passage.docno.is_empty() {
            return Err(IndexError::EmptyDocno);
        }
        if !self.seen.insert(passage.docno.clone()) {
            return Err(IndexError::DuplicateDocno(passage.docno.clone()));
        }
        let doc = self.index.docnos.len() as u32;
        let tokens = self.analyzer.tokenize(&passage.text);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokens.iter() {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for (term, count) in tf {
            let entry = self.index.terms.entry(term).or_default();
            entry.collection_tf += u64::from(count);
            entry.postings.push(Posting { doc, tf: count });
        }
        self.index.docnos.push(passage.docno.clone());
        self.index.doc_lengths.push(tokens.len() as u32);
        self.index.total_length += tokens.len() as u64;
        Ok(())
    }

    pub fn finish(self) -> InvertedIndex {
        self.index
    }
}

pub fn build_index<'p>(
    passages: impl IntoIterator<Item = &'p Passage>,
    analyzer: &Analyzer,
) -> Result<InvertedIndex, IndexError> {
    let mut builder = IndexBuilder::new(analyzer);
    for p in passages {
        builder.add(p)?;
    }
    Ok(builder.finish())
}

/// Files making up a collection: the path itself, or the regular files of a
/// directory in name order.
pub fn collection_files(path: &Path) -> Result<Vec<PathBuf>, IndexError> {
    let io_err = |source| IndexError::Io {
        context: path.display().to_string(),
        source,
    };
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Streams `docno\ttext` passages from a file or directory of files.
pub fn for_each_passage(
    path: &Path,
    mut f: impl FnMut(Passage) -> Result<(), IndexError>,
) -> Result<(), IndexError> {
    for file in collection_files(path)? {
        let origin = file.display().to_string();
        let reader = BufReader::new(File::open(&file).map_err(|source| IndexError::Io {
            context: origin.clone(),
            source,
        })?);
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| IndexError::Io {
                context: origin.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let (docno, text) = line.split_once('\t').ok_or_else(|| IndexError::Line {
                path: origin.clone(),
                line: idx + 1,
                message: "expected docno\\ttext".into(),
            })?;
            f(Passage::new(docno.trim(), text))?;
        }
    }
    Ok(())
}

pub fn read_collection(path: &Path) -> Result<Vec<Passage>, IndexError> {
    let mut out = Vec::new();
    for_each_passage(path, |p| {
        out.push(p);
        Ok(())
    })?;
    Ok(out)
}

pub fn index_collection(path: &Path, analyzer: &Analyzer) -> Result<InvertedIndex, IndexError> {
    let mut builder = IndexBuilder::new(analyzer);
    for_each_passage(path, |p| builder.add(&p))?;
    Ok(builder.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<Passage> {
        vec![
            Passage::new("d1", "Throat cancer symptoms"),
            Passage::new("d2", "Lung cancer treatment options"),
            Passage::new("d3", "Healthy dogs running quickly"),
        ]
    }

    #[test]
    fn stats_and_invariants() {
        let analyzer = Analyzer::default();
        let passages = vec![
            Passage::new("a", "throat cancer symptom"),
            Passage::new("b", "lung cancer spread"),
            Passage::new("c", "esophageal cancer sign"),
        ];
        let index = build_index(&passages, &analyzer).unwrap();
        assert_eq!(index.num_docs(), 3);
        assert_eq!(index.avg_doc_len(), 3.0);
        assert_eq!(index.term("cancer").unwrap().collection_tf, 3);
        index.validate().unwrap();
    }

    #[test]
    fn stopword_only_passage_is_kept_with_zero_length() {
        let analyzer = Analyzer::default();
        let index = build_index(&[Passage::new("x", "the of and")], &analyzer).unwrap();
        assert_eq!(index.num_docs(), 1);
        assert_eq!(index.doc_length(0), 0);
        assert_eq!(index.num_terms(), 0);
    }

    #[test]
    fn duplicate_docno_rejected() {
        let analyzer = Analyzer::default();
        let err = build_index(&[Passage::new("x", "a"), Passage::new("x", "b")], &analyzer).unwrap_err();
        assert!(matches!(err, IndexError::DuplicateDocno(d) if d == "x"));
    }

    #[test]
    fn search_match_set_and_empty_queries() {
        let analyzer = Analyzer::default();
        let index = build_index(&toy(), &analyzer).unwrap();
        for model in [RankingModel::Dph, RankingModel::bm25()] {
            let hits = index.search(&analyzer, "cancer", 10, model);
            let mut docs: Vec<&str> = hits.iter().map(|h| h.docno.as_str()).collect();
            docs.sort();
            assert_eq!(docs, vec!["d1", "d2"]);
            assert!(index.search(&analyzer, "the of", 10, model).is_empty());
            assert_eq!(index.search(&analyzer, "cancer", 1, model).len(), 1);
        }
    }

    #[test]
    fn ties_break_on_docno() {
        let analyzer = Analyzer::default();
        let passages = vec![
            Passage::new("z", "cancer"),
            Passage::new("b", "cancer"),
            Passage::new("m", "cancer"),
        ];
        let index = build_index(&passages, &analyzer).unwrap();
        let hits = index.search(&analyzer, "cancer", 10, RankingModel::bm25());
        let docs: Vec<&str> = hits.iter().map(|h| h.docno.as_str()).collect();
        assert_eq!(docs, vec!["b", "m", "z"]);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    }
}
