use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

/// Parameter-free DFR weight (hypergeometric model, Popper normalisation).
///
/// When the term makes up the whole document (`tf == doclen`) the
/// within-document frequency is clamped to `(doclen - 0.5) / doclen` so the
/// logarithm stays finite.
pub fn score_dph(tf: f64, doclen: f64, coll_tf: f64, n_docs: f64, avgdl: f64, qtf: f64) -> f64 {
    if tf <= 0.0 {
        return 0.0;
    }
    let mut f = tf / doclen;
    if f >= 1.0 {
        f = (doclen - 0.5) / doclen;
    }
    let norm = (1.0 - f) * (1.0 - f) / (tf + 1.0);
    qtf * norm
        * (tf * ((tf * avgdl / doclen) * (n_docs / coll_tf)).log2()
            + 0.5 * (2.0 * PI * tf * (1.0 - f)).log2())
}

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Okapi BM25 with the Robertson idf `ln((N - df + 0.5)/(df + 0.5) + 1)`.
pub fn score_bm25(tf: f64, doclen: f64, df: f64, n_docs: f64, avgdl: f64, k1: f64, b: f64) -> f64 {
    if tf <= 0.0 {
        return 0.0;
    }
    let idf = ((n_docs - df + 0.5) / (df + 0.5) + 1.0).ln();
    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doclen / avgdl))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankingModel {
    Dph,
    Bm25 { k1: f64, b: f64 },
}

impl RankingModel {
    pub fn bm25() -> Self {
        RankingModel::Bm25 {
            k1: BM25_K1,
            b: BM25_B,
        }
    }
}

impl fmt::Display for RankingModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankingModel::Dph => f.write_str("dph"),
            RankingModel::Bm25 { .. } => f.write_str("bm25"),
        }
    }
}

impl FromStr for RankingModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dph" => Ok(RankingModel::Dph),
            "bm25" => Ok(RankingModel::bm25()),
            other => Err(format!("unknown ranking model {other:?} (expected dph or bm25)")),
        }
    }
}
