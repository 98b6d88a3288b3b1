//! End-to-end orchestration: rewrite, index, search, rerank, evaluate, compare.
//!
//! Every artifact carries the config hash: TSV files as a `#` header line,
//! JSON files as a field, run files through their tag.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{BackendKind, ConfigError, PipelineConfig, RerankKind};
use crate::conversation::{
    apply_manual_rewrites, load_manual_rewrites, load_topics, parse_keyed_lines, Conversation,
    DataError, TurnKey,
};
use crate::index::{index_collection, read_collection, Analyzer, IndexError, InvertedIndex, RankingModel};
use crate::llm::{
    BackendError, CachedBackend, ChatBackend, CompletionParams, HttpBackend, HttpConfig, MockBackend,
    ResponseCache,
};
use crate::metrics::{evaluate, read_qrels, read_run, write_run, EvalConfig, MetricReport, MetricsError, Qrels, Run};
use crate::prompt::{
    rewrite_conversation, select_example, ChatMessage, PromptError, PromptTemplate, RewriteRequest, TemplateId,
};
use crate::rerank::{
    rerank, Candidate, ExternalReranker, IdentityReranker, OverlapReranker, RerankError, RerankInput, Reranker,
};
use crate::stats::{compare_systems, comparison_grid, SignificanceReport, StatsError};

/// Errors grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Backend(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Backend(_) => 3,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Usage(e.to_string())
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(DataError, IndexError, MetricsError, StatsError, RerankError);

impl From<BackendError> for PipelineError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::InvalidParams(_) => PipelineError::Usage(e.to_string()),
            other => PipelineError::Backend(other.to_string()),
        }
    }
}

impl From<PromptError> for PipelineError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Backend { .. } => PipelineError::Backend(e.to_string()),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Data(format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// Counts calls that reach the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: ChatBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for CountingBackend<B> {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(messages, params)
    }
}

/// Backend stack for a config: the raw backend counted, optionally behind
/// the response cache.
pub struct BackendStack {
    counted: CachedOrNot,
}

enum CachedOrNot {
    Plain(CountingBackend<Box<dyn ChatBackend>>),
    Cached(CachedBackend<CountingBackend<Box<dyn ChatBackend>>>),
}

impl BackendStack {
    pub fn as_backend(&self) -> &dyn ChatBackend {
        match &self.counted {
            CachedOrNot::Plain(b) => b,
            CachedOrNot::Cached(b) => b,
        }
    }

    /// Requests that reached the underlying backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        match &self.counted {
            CachedOrNot::Plain(b) => b.calls(),
            CachedOrNot::Cached(b) => b.inner().calls(),
        }
    }

    pub fn cache_hits(&self) -> usize {
        match &self.counted {
            CachedOrNot::Plain(_) => 0,
            CachedOrNot::Cached(b) => b.hits(),
        }
    }
}

/// Builds the configured backend. Fails before any work when the HTTP
/// backend lacks its API key or parameters are invalid.
pub fn make_backend(config: &PipelineConfig, conversations: &[Conversation]) -> Result<BackendStack, PipelineError> {
    config.completion_params().validate()?;
    let raw: Box<dyn ChatBackend> = match config.backend {
        BackendKind::Mock => match &config.mock_fixture {
            Some(path) => Box::new(MockBackend::from_file(path)?),
            None => Box::new(MockBackend::from_manual(conversations)),
        },
        BackendKind::Http => {
            let mut http = HttpConfig::from_env(config.endpoint.clone())?;
            http.max_in_flight = config.max_in_flight;
            Box::new(HttpBackend::new(http)?)
        }
    };
    let counted = CountingBackend::new(raw);
    Ok(BackendStack {
        counted: match &config.cache_dir {
            Some(dir) => CachedOrNot::Cached(CachedBackend::new(counted, ResponseCache::new(dir))),
            None => CachedOrNot::Plain(counted),
        },
    })
}

/// Topics with sidecar manual rewrites applied.
pub fn load_conversations(config: &PipelineConfig) -> Result<Vec<Conversation>, PipelineError> {
    let path = PipelineConfig::require_path(&config.topics, "topics")?;
    let mut conversations = load_topics(&path, config.topic_format_for(&path))?;
    if let Some(manual) = &config.manual {
        apply_manual_rewrites(&mut conversations, &load_manual_rewrites(manual)?);
    }
    Ok(conversations)
}

/// Conversations eligible as few-shot examples: the `examples` file when
/// set, otherwise the topics themselves.
pub fn load_example_pool(
    config: &PipelineConfig,
    conversations: &[Conversation],
) -> Result<Vec<Conversation>, PipelineError> {
    match &config.examples {
        Some(path) => Ok(load_topics(path, config.topic_format_for(path))?),
        None => Ok(conversations.to_vec()),
    }
}

pub struct RewriteResult {
    pub conversations: Vec<Conversation>,
    pub transcript: Vec<RewriteRequest>,
}

/// Rewrites every conversation, in parallel across conversations and
/// sequentially within each. Output order follows the input.
pub fn rewrite_dataset(
    template: &PromptTemplate,
    conversations: &[Conversation],
    example_pool: &[Conversation],
    backend: &dyn ChatBackend,
    params: &CompletionParams,
    seed: u64,
    workers: usize,
) -> Result<RewriteResult, PromptError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<(Conversation, Vec<RewriteRequest>)> = pool.install(|| {
        conversations
            .par_iter()
            .map(|conv| {
                let example = select_example(example_pool, conv.conv_id, seed)?;
                let mut transcript = Vec::new();
                let done =
                    rewrite_conversation(template, example, conv, backend, params, Some(&mut transcript))?;
                Ok((done, transcript))
            })
            .collect::<Result<_, PromptError>>()
    })?;
    let mut out = RewriteResult {
        conversations: Vec::with_capacity(results.len()),
        transcript: Vec::new(),
    };
    for (conv, transcript) in results {
        out.conversations.push(conv);
        out.transcript.extend(transcript);
    }
    Ok(out)
}

fn header(hash: &str) -> String {
    format!("# config {hash}\n")
}

fn keyed_tsv<'a>(hash: &str, rows: impl IntoIterator<Item = (String, &'a str)>) -> String {
    let mut out = header(hash);
    for (key, text) in rows {
        out.push_str(&key);
        out.push('\t');
        out.push_str(&text.replace(['\t', '\n'], " "));
        out.push('\n');
    }
    out
}

pub fn rewrites_tsv(conversations: &[Conversation], hash: &str) -> String {
    keyed_tsv(
        hash,
        conversations.iter().flat_map(|c| &c.turns).map(|t| {
            (t.key().to_string(), t.rewritten.as_deref().unwrap_or(&t.raw))
        }),
    )
}

pub fn answers_tsv(conversations: &[Conversation], hash: &str) -> String {
    keyed_tsv(
        hash,
        conversations
            .iter()
            .flat_map(|c| &c.turns)
            .filter_map(|t| t.answer.as_deref().map(|a| (t.key().to_string(), a))),
    )
}

pub fn transcript_jsonl(transcript: &[RewriteRequest], hash: &str) -> String {
    let mut out = serde_json::json!({ "config_hash": hash }).to_string();
    out.push('\n');
    for request in transcript {
        out.push_str(&serde_json::to_string(request).expect("request serializes"));
        out.push('\n');
    }
    out
}

/// Query set as `(qid, text)` pairs.
pub type Queries = Vec<(String, String)>;

pub fn raw_queries(conversations: &[Conversation]) -> Queries {
    conversations
        .iter()
        .flat_map(|c| &c.turns)
        .map(|t| (t.key().to_string(), t.raw.clone()))
        .collect()
}

/// `None` unless every turn has a manual rewrite.
pub fn manual_queries(conversations: &[Conversation]) -> Option<Queries> {
    conversations
        .iter()
        .flat_map(|c| &c.turns)
        .map(|t| t.manual.clone().map(|m| (t.key().to_string(), m)))
        .collect()
}

pub fn rewritten_queries(conversations: &[Conversation]) -> Queries {
    conversations
        .iter()
        .flat_map(|c| &c.turns)
        .map(|t| (t.key().to_string(), t.rewritten.clone().unwrap_or_else(|| t.raw.clone())))
        .collect()
}

pub fn queries_tsv(queries: &Queries, hash: &str) -> String {
    keyed_tsv(hash, queries.iter().map(|(q, t)| (q.clone(), t.as_str())))
}

/// Reads a `<turn_key>\t<text>` query file, ordered by turn key.
pub fn load_queries(path: &Path) -> Result<Queries, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Data(format!("cannot read {}: {e}", path.display())))?;
    let map = parse_keyed_lines(&text, &path.display().to_string())?;
    Ok(map.into_iter().map(|(k, v): (TurnKey, String)| (k.to_string(), v)).collect())
}

/// First-stage retrieval for every query, parallel per topic.
pub fn search_run(
    index: &InvertedIndex,
    analyzer: &Analyzer,
    queries: &Queries,
    k: usize,
    model: RankingModel,
    tag: &str,
) -> Run {
    let lists: Vec<_> = queries
        .par_iter()
        .map(|(qid, text)| (qid, index.search(analyzer, text, k, model)))
        .collect();
    let mut run = Run::new(tag);
    for (qid, docs) in lists {
        run.insert(qid.clone(), &docs);
    }
    run
}

pub fn make_reranker(config: &PipelineConfig) -> Result<Option<Box<dyn Reranker>>, PipelineError> {
    Ok(match config.rerank {
        RerankKind::Off => None,
        RerankKind::Identity => Some(Box::new(IdentityReranker)),
        RerankKind::Overlap => Some(Box::new(OverlapReranker::default())),
        RerankKind::External => {
            let command = config
                .rerank_command
                .clone()
                .ok_or(ConfigError::Missing("rerank_command"))?;
            Some(Box::new(ExternalReranker::new(command)))
        }
    })
}

/// Reranks the top `depth` candidates of every topic. Topics without
/// candidates are carried over empty.
pub fn rerank_run(
    run: &Run,
    queries: &Queries,
    passages: &HashMap<String, String>,
    reranker: &dyn Reranker,
    depth: usize,
    tag: &str,
) -> Result<Run, PipelineError> {
    let text_of: HashMap<&str, &str> = queries.iter().map(|(q, t)| (q.as_str(), t.as_str())).collect();
    let topics: Vec<_> = run.entries.iter().collect();
    let lists: Vec<(String, Vec<crate::index::ScoredDoc>)> = topics
        .into_par_iter()
        .map(|(qid, entries)| {
            if entries.is_empty() {
                return Ok((qid.clone(), Vec::new()));
            }
            let query_text = text_of
                .get(qid.as_str())
                .ok_or_else(|| PipelineError::Data(format!("no query text for topic {qid}")))?;
            let candidates = entries
                .iter()
                .take(depth)
                .map(|e| {
                    let text = passages.get(&e.docno).ok_or_else(|| {
                        PipelineError::Data(format!("docno {} not in collection", e.docno))
                    })?;
                    Ok(Candidate {
                        docno: e.docno.clone(),
                        first_stage_score: e.score,
                        text: text.clone(),
                    })
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            let input = RerankInput {
                qid: qid.clone(),
                query_text: query_text.to_string(),
                candidates,
            };
            Ok((qid.clone(), rerank(&input, reranker)?))
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut out = Run::new(tag);
    for (qid, docs) in lists {
        out.insert(qid, &docs);
    }
    Ok(out)
}

pub fn passage_map(collection: &Path) -> Result<HashMap<String, String>, PipelineError> {
    Ok(read_collection(collection)?
        .into_iter()
        .map(|p| (p.docno, p.text))
        .collect())
}

pub fn evaluate_with_hash(run: &Run, qrels: &Qrels, eval: &EvalConfig, hash: &str) -> MetricReport {
    let mut report = evaluate(run, qrels, eval);
    report.header.insert("config_hash".into(), hash.to_string());
    report
}

/// Compares each system against the baseline with a shared family size.
pub fn compare_all(
    systems: &[MetricReport],
    baseline: &MetricReport,
    alpha: f64,
    m: usize,
) -> Result<Vec<SignificanceReport>, PipelineError> {
    Ok(systems
        .iter()
        .map(|s| compare_systems(s, baseline, alpha, m))
        .collect::<Result<_, _>>()?)
}

pub fn comparison_text(reports: &[SignificanceReport], hash: &str) -> String {
    let mut out = header(hash);
    out.push_str(&comparison_grid(reports));
    for r in reports {
        out.push('\n');
        out.push_str(&r.to_string());
    }
    out
}

pub fn comparison_json(reports: &[SignificanceReport], hash: &str) -> String {
    let value = serde_json::json!({ "config_hash": hash, "comparisons": reports });
    let mut s = serde_json::to_string_pretty(&value).expect("comparison serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RewriteSummary {
    pub turns: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
}

fn single_template(config: &PipelineConfig) -> Result<TemplateId, PipelineError> {
    match config.templates.as_slice() {
        [t] => Ok(*t),
        _ => Err(PipelineError::Usage("rewrite takes exactly one template".into())),
    }
}

/// Sidecar path next to `output`: `rewrites.tsv` becomes `rewrites.<suffix>`.
pub fn sidecar_path(output: &Path, suffix: &str) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "rewrites".into());
    output.with_file_name(format!("{stem}.{suffix}"))
}

/// Rewrites the topics with one template into `output`; answers and the
/// request transcript go to sidecar files next to it.
pub fn cmd_rewrite(config: &PipelineConfig, output: &Path) -> Result<RewriteSummary, PipelineError> {
    let template_id = single_template(config)?;
    let conversations = load_conversations(config)?;
    let backend = make_backend(config, &conversations)?;
    let pool = load_example_pool(config, &conversations)?;
    let template = PromptTemplate::builtin(template_id).with_answers_in_context(config.answers_in_context);
    let hash = config.hash();
    let result = rewrite_dataset(
        &template,
        &conversations,
        &pool,
        backend.as_backend(),
        &config.completion_params(),
        config.seed,
        config.workers,
    )?;
    write_file(output, &rewrites_tsv(&result.conversations, &hash))?;
    if template.uses_answers {
        write_file(&sidecar_path(output, "answers.tsv"), &answers_tsv(&result.conversations, &hash))?;
    }
    if config.transcript {
        write_file(
            &sidecar_path(output, "transcript.jsonl"),
            &transcript_jsonl(&result.transcript, &hash),
        )?;
    }
    Ok(RewriteSummary {
        turns: result.conversations.iter().map(|c| c.turns.len()).sum(),
        backend_calls: backend.backend_calls(),
        cache_hits: backend.cache_hits(),
    })
}

pub fn cmd_index(collection: &Path, output: &Path) -> Result<InvertedIndex, PipelineError> {
    let index = index_collection(collection, &Analyzer::default())?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    index.save(output)?;
    Ok(index)
}

pub fn cmd_search(
    index_path: &Path,
    queries_path: &Path,
    output: &Path,
    k: usize,
    model: RankingModel,
    tag: &str,
) -> Result<Run, PipelineError> {
    if k == 0 {
        return Err(PipelineError::Usage("k must be positive".into()));
    }
    let index = InvertedIndex::load(index_path)?;
    let queries = load_queries(queries_path)?;
    let run = search_run(&index, &Analyzer::default(), &queries, k, model, tag);
    write_run(&run, output)?;
    Ok(run)
}

pub fn cmd_rerank(
    run_path: &Path,
    queries_path: &Path,
    collection: &Path,
    reranker: &dyn Reranker,
    depth: usize,
    output: &Path,
    tag: &str,
) -> Result<Run, PipelineError> {
    let run = read_run(run_path)?;
    let queries = load_queries(queries_path)?;
    let passages = passage_map(collection)?;
    let out = rerank_run(&run, &queries, &passages, reranker, depth, tag)?;
    write_run(&out, output)?;
    Ok(out)
}

pub fn cmd_eval(run_path: &Path, qrels_path: &Path, eval: &EvalConfig, max_grade: u32) -> Result<MetricReport, PipelineError> {
    let run = read_run(run_path)?;
    let qrels = read_qrels(qrels_path, max_grade)?;
    Ok(evaluate(&run, &qrels, eval))
}

pub fn cmd_compare(
    systems: &[PathBuf],
    baseline: &Path,
    alpha: f64,
    m: Option<usize>,
) -> Result<Vec<SignificanceReport>, PipelineError> {
    let base = MetricReport::load(baseline)?;
    let reports: Vec<MetricReport> = systems
        .iter()
        .map(|p| MetricReport::load(p))
        .collect::<Result<_, _>>()?;
    compare_all(&reports, &base, alpha, m.unwrap_or(reports.len().max(1)))
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub run_dir: PathBuf,
    pub hash: String,
    /// `(stage-system, means)` for every evaluated run, in output order.
    pub reports: Vec<(String, MetricReport)>,
    pub backend_calls: usize,
}

impl PipelineSummary {
    pub fn report(&self, name: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

/// Runs every stage and writes the artifact set under `run-<hash>`.
pub fn cmd_pipeline(config: &PipelineConfig) -> Result<PipelineSummary, PipelineError> {
    let conversations = load_conversations(config)?;
    let backend = make_backend(config, &conversations)?;
    let collection = PipelineConfig::require_path(&config.collection, "collection")?;
    let qrels_path = PipelineConfig::require_path(&config.qrels, "qrels")?;
    let reranker = make_reranker(config)?;
    let qrels = read_qrels(&qrels_path, config.max_grade)?;
    let pool = load_example_pool(config, &conversations)?;

    let hash = config.hash();
    let dir = config.run_dir();
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    write_file(&dir.join("config.txt"), &format!("{}{}", header(&hash), config.canonical_text()))?;

    let analyzer = Analyzer::default();
    let index = match &config.index {
        Some(path) => InvertedIndex::load(path)?,
        None => {
            let index = index_collection(&collection, &analyzer)?;
            index.save(&dir.join("index.crix"))?;
            index
        }
    };

    let mut systems: Vec<(String, Queries)> = vec![("raw".into(), raw_queries(&conversations))];
    if let Some(manual) = manual_queries(&conversations) {
        systems.push(("manual".into(), manual));
    }
    for &id in &config.templates {
        let template = PromptTemplate::builtin(id).with_answers_in_context(config.answers_in_context);
        let result = rewrite_dataset(
            &template,
            &conversations,
            &pool,
            backend.as_backend(),
            &config.completion_params(),
            config.seed,
            config.workers,
        )?;
        write_file(
            &dir.join(format!("rewrites-{id}.tsv")),
            &rewrites_tsv(&result.conversations, &hash),
        )?;
        if template.uses_answers {
            write_file(
                &dir.join(format!("answers-{id}.tsv")),
                &answers_tsv(&result.conversations, &hash),
            )?;
        }
        if config.transcript {
            write_file(
                &dir.join(format!("transcript-{id}.jsonl")),
                &transcript_jsonl(&result.transcript, &hash),
            )?;
        }
        systems.push((id.to_string(), rewritten_queries(&result.conversations)));
    }
    for (name, queries) in systems.iter().filter(|(n, _)| n == "raw" || n == "manual") {
        write_file(&dir.join(format!("queries-{name}.tsv")), &queries_tsv(queries, &hash))?;
    }
    let first_runs: Vec<Run> = systems
        .iter()
        .map(|(name, queries)| {
            let tag = format!("first-{name}-{hash}");
            search_run(&index, &analyzer, queries, config.k_first, config.ranking(), &tag)
        })
        .collect();

    let passages = match reranker {
        Some(_) => Some(passage_map(&collection)?),
        None => None,
    };
    let eval = config.eval_config();
    let mut stages: Vec<&str> = vec!["first"];
    if reranker.is_some() {
        stages.push("rerank");
    }
    let mut summary = PipelineSummary {
        run_dir: dir.clone(),
        hash: hash.clone(),
        reports: Vec::new(),
        backend_calls: backend.backend_calls(),
    };
    for stage in stages {
        let mut reports: Vec<(String, MetricReport)> = Vec::new();
        for ((name, queries), first) in systems.iter().zip(&first_runs) {
            let run = match (stage, &reranker, &passages) {
                ("rerank", Some(r), Some(p)) => rerank_run(
                    first,
                    queries,
                    p,
                    r.as_ref(),
                    config.rerank_depth,
                    &format!("rerank-{name}-{hash}"),
                )?,
                _ => first.clone(),
            };
            let label = format!("{stage}-{name}");
            write_run(&run, &dir.join(format!("{label}.run")))?;
            let report = evaluate_with_hash(&run, &qrels, &eval, &hash);
            write_file(&dir.join(format!("report-{label}.json")), &report.to_json())?;
            write_file(&dir.join(format!("report-{label}.txt")), &report.to_text())?;
            reports.push((name.clone(), report));
        }
        let baseline = &reports[0].1;
        let templates: Vec<MetricReport> = reports
            .iter()
            .filter(|(n, _)| n != "raw" && n != "manual")
            .map(|(_, r)| r.clone())
            .collect();
        if !templates.is_empty() {
            let comparisons = compare_all(&templates, baseline, config.alpha, config.family_size())?;
            write_file(&dir.join(format!("compare-{stage}.txt")), &comparison_text(&comparisons, &hash))?;
            write_file(&dir.join(format!("compare-{stage}.json")), &comparison_json(&comparisons, &hash))?;
        }
        summary
            .reports
            .extend(reports.into_iter().map(|(n, r)| (format!("{stage}-{n}"), r)));
    }
    Ok(summary)
}
