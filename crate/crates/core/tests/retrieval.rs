mod common;

use std::f64::consts::PI;

use convo_rewrite::index::{
    build_index, porter::stem, read_collection, score_bm25, score_dph, Analyzer, InvertedIndex, Passage,
    RankingModel,
};
use convo_rewrite::metrics::{parse_run, Run};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn index_of(docs: &[(String, Vec<String>)]) -> InvertedIndex {
    let passages: Vec<Passage> = docs.iter().map(|(d, w)| Passage::new(d.clone(), w.join(" "))).collect();
    build_index(&passages, &Analyzer::default()).unwrap()
}

#[test]
fn synthetic_vocabulary_survives_analysis() {
    let a = Analyzer::default();
    for w in vocab(20) {
        assert_eq!(a.tokenize(&w), vec![w.clone()]);
    }
}

#[test]
fn porter_matches_reference_vocabulary() {
    let text = std::fs::read_to_string(fixture("porter_vocab.tsv")).unwrap();
    let mut mismatches = Vec::new();
    let mut n = 0;
    for line in text.lines() {
        let (word, expected) = line.split_once('\t').unwrap();
        n += 1;
        let got = stem(word);
        if got != expected {
            mismatches.push(format!("{word}: {got} != {expected}"));
        }
    }
    assert!(n > 4000);
    assert!(mismatches.is_empty(), "{} mismatches: {:?}", mismatches.len(), &mismatches[..mismatches.len().min(20)]);
}

#[test]
fn scoring_formulas_match_direct_derivation() {
    // DPH written with natural logs, BM25 spelled out.
    let dph = |tf: f64, dl: f64, ctf: f64, n: f64, avgdl: f64| {
        let f = if tf / dl >= 1.0 { (dl - 0.5) / dl } else { tf / dl };
        let norm = (1.0 - f).powi(2) / (tf + 1.0);
        norm * (tf * (tf * avgdl * n / (dl * ctf)).ln() + 0.5 * (2.0 * PI * tf * (1.0 - f)).ln()) / 2f64.ln()
    };
    let bm25 = |tf: f64, dl: f64, df: f64, n: f64, avgdl: f64| {
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        idf * (tf * 2.2) / (tf + 1.2 * (0.25 + 0.75 * dl / avgdl))
    };
    for &(tf, dl, ctf, df, n, avgdl) in &[
        (1.0, 3.0, 2.0, 2.0, 3.0, 3.0),
        (2.0, 10.0, 7.0, 4.0, 40.0, 8.5),
        (5.0, 5.0, 9.0, 3.0, 12.0, 6.0),
        (3.0, 120.0, 300.0, 90.0, 1000.0, 57.25),
    ] {
        assert!((score_dph(tf, dl, ctf, n, avgdl, 1.0) - dph(tf, dl, ctf, n, avgdl)).abs() < 1e-12);
        assert!((score_bm25(tf, dl, df, n, avgdl, 1.2, 0.75) - bm25(tf, dl, df, n, avgdl)).abs() < 1e-12);
    }
}

#[test]
fn golden_search_runs() {
    let passages = read_collection(&fixture("toy/collection.tsv")).unwrap();
    assert_eq!(passages.len(), 12);
    let index = build_index(&passages, &Analyzer::default()).unwrap();
    let queries = convo_rewrite::pipeline::load_queries(&fixture("toy/queries4.tsv")).unwrap();
    for (model, file) in [(RankingModel::Dph, "toy/golden_search_dph.run"), (RankingModel::bm25(), "toy/golden_search_bm25.run")] {
        let run = convo_rewrite::pipeline::search_run(&index, &Analyzer::default(), &queries, 10, model, "first");
        let golden = std::fs::read_to_string(fixture(file)).unwrap();
        assert!(golden.lines().count() <= 40);
        assert_eq!(run.to_trec_string(), golden, "{model}");
    }
}

#[test]
fn default_depth_is_a_thousand() {
    assert_eq!(convo_rewrite::PipelineConfig::default().k_first, 1000);
}

#[test]
fn random_corpora_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = vocab(20);
    for _ in 0..50 {
        let n = rand::Rng::random_range(&mut rng, 1..=100);
        let docs = random_corpus(&mut rng, n, &v);
        let index = index_of(&docs);
        for _ in 0..5 {
            let ql = rand::Rng::random_range(&mut rng, 1..=4);
            let q: Vec<String> = (0..ql).map(|_| v[rand::Rng::random_range(&mut rng, 0..v.len())].clone()).collect();
            for model in [RankingModel::Dph, RankingModel::bm25()] {
                let got = index.search(&Analyzer::default(), &q.join(" "), n, model);
                let want = brute_force_search(&docs, &q, model);
                let got: Vec<(String, f64)> = got.into_iter().map(|d| (d.docno, d.score)).collect();
                assert_eq!(got, want);
                assert!(got.iter().all(|(_, s)| s.is_finite()));
            }
        }
    }
}

#[test]
fn golden_run_reparses_to_itself() {
    let text = std::fs::read_to_string(fixture("toy/golden_search_dph.run")).unwrap();
    let run: Run = parse_run(&text, "golden").unwrap();
    assert_eq!(run.to_trec_string(), text);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_invariants(seed in any::<u64>(), n in 1usize..40, k in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab(15);
        let docs = random_corpus(&mut rng, n, &v);
        let index = index_of(&docs);
        let q = format!("{} {}", v[seed as usize % 15], v[(seed >> 8) as usize % 15]);
        for model in [RankingModel::Dph, RankingModel::bm25()] {
            let hits = index.search(&Analyzer::default(), &q, k, model);
            prop_assert!(hits.len() <= k);
            for (i, h) in hits.iter().enumerate() {
                prop_assert_eq!(h.rank as usize, i + 1);
                prop_assert!(h.score.is_finite());
            }
            for w in hits.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].docno < w[1].docno));
            }
            // top-k is a prefix of the full ranking
            let all = index.search(&Analyzer::default(), &q, usize::MAX, model);
            prop_assert_eq!(&all[..hits.len()], &hits[..]);
        }
    }

    #[test]
    fn index_round_trips_through_bytes(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs = random_corpus(&mut rng, n, &vocab(10));
        let index = index_of(&docs);
        let bytes = index.to_bytes();
        let back = InvertedIndex::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &index);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn stemming_is_total(word in "[a-z]{0,16}") {
        let s = stem(&word);
        prop_assert!(s.len() <= word.len());
    }
}

#[test]
fn search_is_insensitive_to_query_term_order() {
    let passages = read_collection(&fixture("toy/collection.tsv")).unwrap();
    let index = build_index(&passages, &Analyzer::default()).unwrap();
    let a = index.search(&Analyzer::default(), "throat cancer symptoms", 10, RankingModel::Dph);
    let b = index.search(&Analyzer::default(), "symptoms cancer throat", 10, RankingModel::Dph);
    assert_eq!(a, b);
}
