//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use convo_rewrite::conversation::{Conversation, Turn};
use convo_rewrite::index::{score_bm25, score_dph, RankingModel};
use convo_rewrite::metrics::{Qrels, Run, RunEntry};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn script(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scripts").join(name)
}

// ---------------------------------------------------------------- retrieval

/// Tokens that pass through the analyzer unchanged.
pub fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

pub fn random_corpus(rng: &mut impl Rng, n_docs: usize, vocab: &[String]) -> Vec<(String, Vec<String>)> {
    (0..n_docs)
        .map(|i| {
            let len = rng.random_range(1..=12);
            let words = (0..len)
                .map(|_| vocab[rng.random_range(0..vocab.len())].clone())
                .collect();
            (format!("D{:03}", rng.random_range(0..1000) * 1000 + i), words)
        })
        .collect()
}

/// Scores every document from scratch: term statistics by linear scans,
/// per-term weights summed over unique query terms in sorted order.
pub fn brute_force_search(
    docs: &[(String, Vec<String>)],
    query: &[String],
    model: RankingModel,
) -> Vec<(String, f64)> {
    let n = docs.len() as f64;
    let total: usize = docs.iter().map(|(_, w)| w.len()).sum();
    let avgdl = total as f64 / n;
    let mut qtf: BTreeMap<&str, u32> = BTreeMap::new();
    for t in query {
        *qtf.entry(t.as_str()).or_default() += 1;
    }
    let mut out = Vec::new();
    for (docno, words) in docs {
        let mut score = 0.0;
        let mut matched = false;
        for (&term, &q) in &qtf {
            let tf = words.iter().filter(|w| *w == term).count();
            if tf == 0 {
                continue;
            }
            matched = true;
            let dl = words.len() as f64;
            score += match model {
                RankingModel::Dph => {
                    let coll: usize = docs.iter().map(|(_, w)| w.iter().filter(|x| *x == term).count()).sum();
                    score_dph(tf as f64, dl, coll as f64, n, avgdl, f64::from(q))
                }
                RankingModel::Bm25 { k1, b } => {
                    let df = docs.iter().filter(|(_, w)| w.iter().any(|x| x == term)).count();
                    f64::from(q) * score_bm25(tf as f64, dl, df as f64, n, avgdl, k1, b)
                }
            };
        }
        if matched {
            out.push((docno.clone(), score));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

// ------------------------------------------------------------------ metrics

pub struct Instance {
    pub run: Run,
    pub qrels: Qrels,
}

pub fn random_instance(rng: &mut impl Rng, topics: usize) -> Instance {
    let pool: Vec<String> = (0..30).map(|i| format!("P{i:02}")).collect();
    let mut run = Run::new("rand");
    let mut qrels = Qrels::default();
    for t in 0..topics {
        let qid = format!("{}_{}", t / 3 + 1, t % 3 + 1);
        let mut docs = pool.clone();
        docs.shuffle(rng);
        let depth = rng.random_range(0..=20);
        let mut score = 100.0;
        let entries: Vec<RunEntry> = docs[..depth]
            .iter()
            .enumerate()
            .map(|(i, d)| {
                if rng.random_bool(0.7) {
                    score -= rng.random_range(0.0..3.0);
                }
                RunEntry {
                    docno: d.clone(),
                    rank: i as u32 + 1,
                    score,
                }
            })
            .collect();
        if rng.random_bool(0.9) {
            run.entries.insert(qid.clone(), entries);
        }
        docs.shuffle(rng);
        let judged = rng.random_range(1..=12);
        for d in &docs[..judged] {
            qrels.insert(qid.clone(), d.clone(), rng.random_range(0..=2));
        }
    }
    Instance { run, qrels }
}

pub fn oracle_rr(ranking: &[&str], grades: &HashMap<&str, u32>, thr: u32) -> f64 {
    for (i, d) in ranking.iter().enumerate() {
        if grades.get(d).copied().unwrap_or(0) >= thr {
            return 1.0 / (i as f64 + 1.0);
        }
    }
    0.0
}

pub fn oracle_precision(ranking: &[&str], grades: &HashMap<&str, u32>, k: usize, thr: u32) -> f64 {
    let mut hits = 0usize;
    for i in 0..k {
        if let Some(d) = ranking.get(i) {
            if grades.get(d).copied().unwrap_or(0) >= thr {
                hits += 1;
            }
        }
    }
    hits as f64 / k as f64
}

pub fn oracle_recall(ranking: &[&str], grades: &HashMap<&str, u32>, k: usize, thr: u32) -> Option<f64> {
    let relevant: HashSet<&str> = grades.iter().filter(|(_, &g)| g >= thr).map(|(d, _)| *d).collect();
    if relevant.is_empty() {
        return None;
    }
    let top: HashSet<&str> = ranking.iter().take(k).copied().collect();
    Some(relevant.intersection(&top).count() as f64 / relevant.len() as f64)
}

pub fn oracle_ndcg(ranking: &[&str], grades: &HashMap<&str, u32>, k: usize) -> Option<f64> {
    let discount = |i: usize| 1.0 / ((i + 2) as f64).ln() * std::f64::consts::LN_2;
    let dcg: f64 = (0..k.min(ranking.len()))
        .map(|i| f64::from(grades.get(ranking[i]).copied().unwrap_or(0)) * discount(i))
        .sum();
    let mut all: Vec<u32> = grades.values().copied().collect();
    all.sort();
    all.reverse();
    let idcg: f64 = (0..k.min(all.len())).map(|i| f64::from(all[i]) * discount(i)).sum();
    (idcg > 0.0).then(|| dcg / idcg)
}

// -------------------------------------------------------------- statistics

/// Adaptive Simpson quadrature.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `Γ((ν+1)/2) / Γ(ν/2)` for integer ν by the two-step recurrence.
pub fn gamma_ratio(df: u32) -> f64 {
    let pi = std::f64::consts::PI;
    let mut r = if df % 2 == 1 { 1.0 / pi.sqrt() } else { pi.sqrt() / 2.0 };
    let mut v = if df % 2 == 1 { 1 } else { 2 };
    while v < df {
        r *= (v as f64 + 1.0) / v as f64;
        v += 2;
    }
    r
}

/// Two-sided Student-t p-value by integrating the density over `[0, |t|]`.
pub fn quadrature_p(t: f64, df: u32) -> f64 {
    let v = f64::from(df);
    let c = gamma_ratio(df) / (v * std::f64::consts::PI).sqrt();
    let pdf = move |x: f64| c * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0);
    let mass = simpson(&pdf, 0.0, t.abs(), 1e-14);
    (1.0 - 2.0 * mass).max(0.0)
}

// ---------------------------------------------------------- conversations

pub fn synthetic_conversation(rng: &mut impl Rng, conv_id: u32, max_turns: u32) -> Conversation {
    let n = rng.random_range(1..=max_turns);
    let turns = (1..=n)
        .map(|i| {
            let raw = format!("c{conv_id} question {i} {}", rng.random_range(0..1_000_000));
            Turn::new(conv_id, i, raw.clone()).with_manual(format!("{raw} resolved"))
        })
        .collect();
    Conversation::new(conv_id, turns).unwrap()
}

/// Echoes the utterance back and answers with `answer to <utterance>`,
/// keeping every request it saw.
#[derive(Default)]
pub struct RecordingBackend {
    pub requests: std::sync::Mutex<Vec<Vec<convo_rewrite::ChatMessage>>>,
}

impl RecordingBackend {
    pub fn final_utterances(&self) -> Vec<String> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .map(|m| m.last().unwrap().content.rsplit('\n').next().unwrap().to_string())
            .collect()
    }
}

impl convo_rewrite::ChatBackend for RecordingBackend {
    fn complete(
        &self,
        messages: &[convo_rewrite::ChatMessage],
        _params: &convo_rewrite::CompletionParams,
    ) -> Result<String, convo_rewrite::BackendError> {
        self.requests.lock().unwrap().push(messages.to_vec());
        let utterance = messages.last().unwrap().content.rsplit('\n').next().unwrap().to_string();
        Ok(format!("{utterance}\nAnswer: answer to {utterance}"))
    }
}

pub fn load_json_topics(rel: &str) -> Vec<Conversation> {
    convo_rewrite::conversation::load_topics(&fixture(rel), convo_rewrite::conversation::TopicFormat::CastJson).unwrap()
}
