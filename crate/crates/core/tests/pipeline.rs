mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use convo_rewrite::config::{BackendKind, RerankKind};
use convo_rewrite::llm::API_KEY_ENV;
use convo_rewrite::pipeline::{cmd_pipeline, cmd_rewrite, sidecar_path, PipelineError};
use convo_rewrite::{PipelineConfig, TemplateId};
use serde_json::Value;

use common::*;

fn toy_config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        topics: Some(fixture("toy/topics.json")),
        collection: Some(fixture("toy/collection.tsv")),
        qrels: Some(fixture("toy/qrels.txt")),
        rerank: RerankKind::Overlap,
        out_dir: out.to_path_buf(),
        ..Default::default()
    }
}

fn conv31_config(template: TemplateId) -> PipelineConfig {
    PipelineConfig {
        topics: Some(fixture("conv31_topics.json")),
        examples: Some(fixture("conv31_examples.json")),
        templates: vec![template],
        ..Default::default()
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
    }
    out
}

fn keyed(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once('\t').unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

#[test]
fn toy_rewrites_beat_raw_utterances() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = cmd_pipeline(&toy_config(tmp.path())).unwrap();
    for stage in ["first", "rerank"] {
        let raw = &summary.report(&format!("{stage}-raw")).unwrap().means;
        for id in TemplateId::ALL {
            let rewritten = &summary.report(&format!("{stage}-{id}")).unwrap().means;
            assert!(rewritten["MRR"] > raw["MRR"], "{stage} {id}: {} vs {}", rewritten["MRR"], raw["MRR"]);
            assert!(rewritten["NDCG@3"] > raw["NDCG@3"], "{stage} {id}");
        }
    }
    // oracle values for the first stage
    let raw = &summary.report("first-raw").unwrap().means;
    let p5 = &summary.report("first-P5").unwrap().means;
    assert!((raw["MRR"] - 2.0 / 3.0).abs() < 1e-4 && (raw["NDCG@3"] - 0.7334).abs() < 1e-4);
    assert!((p5["MRR"] - 5.0 / 6.0).abs() < 1e-4 && (p5["NDCG@3"] - 0.8416).abs() < 1e-4);
    // first turns are copied, the rest go to the backend once per template
    assert_eq!(summary.backend_calls, 4 * TemplateId::ALL.len());
}

#[test]
fn toy_pipeline_is_bit_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg_b = toy_config(b.path());
    cfg_b.workers = 1;
    let sa = cmd_pipeline(&toy_config(a.path())).unwrap();
    let sb = cmd_pipeline(&cfg_b).unwrap();
    assert_eq!(sa.hash, sb.hash);
    assert_eq!(sa.run_dir.file_name(), sb.run_dir.file_name());
    assert_eq!(sa.run_dir.file_name().unwrap().to_str().unwrap(), format!("run-{}", sa.hash));
    let (fa, fb) = (snapshot(&sa.run_dir), snapshot(&sb.run_dir));
    assert!(fa.len() > 20);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{} differs", name.display());
    }
}

#[test]
fn every_text_artifact_names_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(tmp.path());
    cfg.transcript = true;
    let summary = cmd_pipeline(&cfg).unwrap();
    for (name, bytes) in snapshot(&summary.run_dir) {
        if name.extension().is_some_and(|e| e == "crix") {
            continue;
        }
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.contains(&summary.hash), "{} lacks the hash", name.display());
    }
    // a hashed key moves the directory, an operational key does not
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(other.hash(), cfg.hash());
    other = cfg.clone();
    other.workers = 9;
    other.out_dir = PathBuf::from("elsewhere");
    assert_eq!(other.hash(), cfg.hash());
}

#[test]
fn conversation_31_mock_rewrites_equal_manual_column() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rewrites.tsv");
    let summary = cmd_rewrite(&conv31_config(TemplateId::P5), &out).unwrap();
    assert_eq!((summary.turns, summary.backend_calls), (9, 8));
    let got = keyed(&out);
    let conv = &load_json_topics("conv31_topics.json")[0];
    assert_eq!(got.len(), 9);
    for turn in &conv.turns {
        let want = if turn.turn_no == 1 { &turn.raw } else { turn.manual.as_ref().unwrap() };
        assert_eq!(&got[&turn.key().to_string()], want);
    }
}

#[test]
fn warm_cache_makes_no_backend_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = conv31_config(TemplateId::P1);
    cfg.cache_dir = Some(tmp.path().join("cache"));
    let (a, b) = (tmp.path().join("a.tsv"), tmp.path().join("b.tsv"));
    let cold = cmd_rewrite(&cfg, &a).unwrap();
    let warm = cmd_rewrite(&cfg, &b).unwrap();
    assert_eq!((cold.backend_calls, cold.cache_hits), (8, 0));
    assert_eq!((warm.backend_calls, warm.cache_hits), (0, 8));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(sidecar_path(&a, "answers.tsv")).unwrap(),
        std::fs::read(sidecar_path(&b, "answers.tsv")).unwrap()
    );
}

#[test]
fn p4_transcript_shows_eight_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = conv31_config(TemplateId::P4);
    cfg.transcript = true;
    let out = tmp.path().join("p4.tsv");
    cmd_rewrite(&cfg, &out).unwrap();
    let text = std::fs::read_to_string(sidecar_path(&out, "transcript.jsonl")).unwrap();
    let mut lines = text.lines();
    let head: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(head["config_hash"], cfg.hash());
    let requests: Vec<Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(requests.len(), 8);
    for r in &requests {
        assert_eq!(r["template_id"], "P4");
        let messages = r["messages"].as_array().unwrap();
        let last = messages.last().unwrap()["content"].as_str().unwrap();
        assert_eq!(last.matches("Question: ").count(), 8);
        assert_eq!(last.matches("Rewritten: ").count(), 8);
    }
    assert!(!sidecar_path(&out, "answers.tsv").exists());
}

#[test]
fn http_backend_without_key_fails_before_work() {
    std::env::remove_var(API_KEY_ENV);
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(tmp.path());
    cfg.backend = BackendKind::Http;
    let err = cmd_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Backend(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains(API_KEY_ENV));
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);

    let mut rewrite = conv31_config(TemplateId::P5);
    rewrite.backend = BackendKind::Http;
    let out = tmp.path().join("never.tsv");
    assert_eq!(cmd_rewrite(&rewrite, &out).unwrap_err().exit_code(), 3);
    assert!(!out.exists());
}

#[test]
fn missing_inputs_are_reported_with_stable_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(tmp.path());
    cfg.qrels = Some(tmp.path().join("absent.txt"));
    assert_eq!(cmd_pipeline(&cfg).unwrap_err().exit_code(), 2);
    cfg.qrels = None;
    assert_eq!(cmd_pipeline(&cfg).unwrap_err().exit_code(), 1);
    let mut two = conv31_config(TemplateId::P5);
    two.templates.push(TemplateId::P1);
    assert_eq!(cmd_rewrite(&two, &tmp.path().join("x.tsv")).unwrap_err().exit_code(), 1);
}
