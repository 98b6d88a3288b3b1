use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use convo_rewrite::config::{PipelineConfig, RerankKind};
use convo_rewrite::index::RankingModel;
use convo_rewrite::metrics::MetricReport;
use convo_rewrite::pipeline::{self, PipelineError};
use convo_rewrite::prompt::TemplateId;
use convo_rewrite::rerank::{ExternalReranker, IdentityReranker, OverlapReranker, Reranker};

/// Conversational query rewriting with prompted chat models, evaluated
/// through a two-stage retrieval pipeline.
///
/// Exit codes: 0 success, 1 usage, 2 data error, 3 backend error.
#[derive(Parser)]
#[command(name = "convo-rewrite", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Config file of `key = value` lines, applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable); flags win over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite every turn of the topics with one prompt template.
    Rewrite(RewriteArgs),
    /// Build a binary inverted index from `docno<TAB>text` passages.
    Index(IndexArgs),
    /// First-stage retrieval for a `turn_key<TAB>query` file.
    Search(SearchArgs),
    /// Rerank the top candidates of a run.
    Rerank(RerankArgs),
    /// Score a run against qrels.
    Eval(EvalArgs),
    /// Paired t-tests of system reports against a baseline report.
    Compare(CompareArgs),
    /// Rewrite, retrieve, rerank, evaluate and compare in one go.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// Chat backend: mock or http (http reads CONVO_REWRITE_API_KEY).
    #[arg(long)]
    backend: Option<String>,
    /// `raw<TAB>rewrite` lines for the mock backend [default: manual rewrites].
    #[arg(long)]
    mock_fixture: Option<PathBuf>,
    /// Chat model name [default: gpt-3.5-turbo].
    #[arg(long = "llm-model")]
    llm_model: Option<String>,
    /// Sampling temperature [default: 0.0].
    #[arg(long)]
    temperature: Option<f64>,
    /// Output token limit [default: 256].
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Chat-completions endpoint for the http backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Conversations rewritten concurrently [default: 4].
    #[arg(long)]
    workers: Option<usize>,
    /// Example-selection seed [default: 13].
    #[arg(long)]
    seed: Option<u64>,
    /// Feed generated answers back into the context for E [default: true].
    #[arg(long)]
    answers_in_context: Option<bool>,
    /// Dump every request as JSON lines.
    #[arg(long)]
    transcript: bool,
}

#[derive(Args)]
struct TopicArgs {
    /// Topics file (CAsT-style JSON, or `.tsv`).
    #[arg(long)]
    topics: Option<PathBuf>,
    /// Sidecar `turn_key<TAB>manual rewrite` file; wins over inline values.
    #[arg(long)]
    manual: Option<PathBuf>,
    /// Conversations used only as few-shot examples.
    #[arg(long)]
    examples: Option<PathBuf>,
}

#[derive(Args)]
struct RewriteArgs {
    #[command(flatten)]
    topics: TopicArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Prompt template: P1..P5 or E [default: P5].
    #[arg(long)]
    template: Option<String>,
    /// Rewrites output file.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    /// Passage file or directory of passage files.
    #[arg(long)]
    collection: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Also print a readable dump of the index.
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Candidates per query [default: 1000].
    #[arg(short)]
    k: Option<usize>,
    /// Ranking model: dph or bm25 [default: dph].
    #[arg(long)]
    model: Option<String>,
    /// Run tag.
    #[arg(long, default_value = "first")]
    tag: String,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    collection: PathBuf,
    /// identity, overlap or external [default: overlap].
    #[arg(long, default_value = "overlap")]
    reranker: String,
    /// Shell command speaking the JSON-lines exchange (external reranker).
    #[arg(long)]
    command: Option<String>,
    /// Candidates reranked per query [default: 1000].
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, default_value = "rerank")]
    tag: String,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated metrics [default: MRR,P@1,NDCG@3,R@500].
    #[arg(long)]
    metrics: Option<String>,
    /// Minimum grade counted as relevant [default: 1].
    #[arg(long)]
    rel_threshold: Option<u32>,
    /// NDCG gain: linear or exponential [default: linear].
    #[arg(long)]
    gain: Option<String>,
    /// Exclude judged topics missing from the run instead of scoring 0.
    #[arg(long)]
    lenient: bool,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the text table here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline report (JSON from `eval --json`).
    #[arg(long)]
    baseline: PathBuf,
    /// System reports compared against the baseline.
    #[arg(required = true)]
    systems: Vec<PathBuf>,
    /// Family-wise significance level [default: 0.05].
    #[arg(long)]
    alpha: Option<f64>,
    /// Bonferroni comparison count [default: number of systems].
    #[arg(short)]
    m: Option<usize>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    topics: TopicArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    collection: Option<PathBuf>,
    /// Prebuilt index; built from the collection when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Comma-separated templates [default: P1,P2,P3,P4,P5,E].
    #[arg(long)]
    templates: Option<String>,
    /// Ranking model: dph or bm25 [default: dph].
    #[arg(long)]
    model: Option<String>,
    /// First-stage depth [default: 1000].
    #[arg(long)]
    k_first: Option<usize>,
    /// off, identity, overlap or external [default: off].
    #[arg(long)]
    rerank: Option<String>,
    #[arg(long)]
    rerank_command: Option<String>,
    /// Parent of the `run-<hash>` directory [default: runs].
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

fn usage(message: impl Into<String>) -> PipelineError {
    PipelineError::Usage(message.into())
}

fn base_config(global: &GlobalArgs) -> Result<PipelineConfig, PipelineError> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &global.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Data(format!("cannot read {}: {e}", path.display())))?;
        config.apply_text(&text, &path.display().to_string())?;
    }
    for item in &global.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        config.set(k.trim(), v)?;
    }
    Ok(config)
}

/// Collects `(key, value)` overrides from explicitly given flags.
#[derive(Default)]
struct Overrides(Vec<(&'static str, String)>);

impl Overrides {
    fn path(&mut self, key: &'static str, v: &Option<PathBuf>) {
        if let Some(p) = v {
            self.0.push((key, p.display().to_string()));
        }
    }

    fn value(&mut self, key: &'static str, v: Option<impl ToString>) {
        if let Some(v) = v {
            self.0.push((key, v.to_string()));
        }
    }

    fn apply(self, config: &mut PipelineConfig) -> Result<(), PipelineError> {
        for (k, v) in &self.0 {
            config.set(k, v)?;
        }
        Ok(())
    }
}

fn topic_overrides(o: &mut Overrides, a: &TopicArgs) {
    o.path("topics", &a.topics);
    o.path("manual", &a.manual);
    o.path("examples", &a.examples);
}

fn backend_overrides(o: &mut Overrides, a: &BackendArgs) {
    o.value("backend", a.backend.as_ref());
    o.path("mock_fixture", &a.mock_fixture);
    o.value("model", a.llm_model.as_ref());
    o.value("temperature", a.temperature);
    o.value("max_tokens", a.max_tokens);
    o.value("endpoint", a.endpoint.as_ref());
    o.path("cache_dir", &a.cache_dir);
    o.value("workers", a.workers);
    o.value("seed", a.seed);
    o.value("answers_in_context", a.answers_in_context);
    if a.transcript {
        o.value("transcript", Some(true));
    }
}

fn parse_model(name: &str) -> Result<RankingModel, PipelineError> {
    name.parse().map_err(usage)
}

fn write_out(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text)
        .map_err(|e| PipelineError::Data(format!("cannot write {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = base_config(&cli.global)?;
    match cli.command {
        Command::Rewrite(args) => {
            let mut o = Overrides::default();
            topic_overrides(&mut o, &args.topics);
            backend_overrides(&mut o, &args.backend);
            o.value("templates", args.template.as_ref());
            o.apply(&mut config)?;
            if args.template.is_none() && config.templates.len() != 1 {
                config.templates = vec![TemplateId::P5];
            }
            let summary = pipeline::cmd_rewrite(&config, &args.output)?;
            eprintln!(
                "rewrote {} turns ({} backend calls, {} cache hits) -> {}",
                summary.turns,
                summary.backend_calls,
                summary.cache_hits,
                args.output.display()
            );
        }
        Command::Index(args) => {
            let index = pipeline::cmd_index(&args.collection, &args.output)?;
            if args.dump {
                print!("{}", index.dump_text());
            }
            eprintln!(
                "indexed {} passages, {} terms -> {}",
                index.num_docs(),
                index.num_terms(),
                args.output.display()
            );
        }
        Command::Search(args) => {
            let model = match &args.model {
                Some(m) => parse_model(m)?,
                None => config.ranking(),
            };
            let k = args.k.unwrap_or(config.k_first);
            let run = pipeline::cmd_search(&args.index, &args.queries, &args.output, k, model, &args.tag)?;
            eprintln!("searched {} topics with {model} (k={k}) -> {}", run.topic_count(), args.output.display());
        }
        Command::Rerank(args) => {
            let reranker: Box<dyn Reranker> = match args.reranker.as_str() {
                "identity" => Box::new(IdentityReranker),
                "overlap" => Box::new(OverlapReranker::default()),
                "external" => {
                    let command = args
                        .command
                        .clone()
                        .or_else(|| config.rerank_command.clone())
                        .ok_or_else(|| usage("the external reranker needs --command"))?;
                    Box::new(ExternalReranker::new(command))
                }
                other => return Err(usage(format!("unknown reranker {other:?} (expected identity, overlap or external)"))),
            };
            let depth = args.depth.unwrap_or(config.rerank_depth);
            if !(1..=convo_rewrite::rerank::MAX_CANDIDATES).contains(&depth) {
                return Err(usage(format!("depth must lie in 1..={}", convo_rewrite::rerank::MAX_CANDIDATES)));
            }
            let run = pipeline::cmd_rerank(
                &args.run,
                &args.queries,
                &args.collection,
                reranker.as_ref(),
                depth,
                &args.output,
                &args.tag,
            )?;
            eprintln!("reranked {} topics -> {}", run.topic_count(), args.output.display());
        }
        Command::Eval(args) => {
            let mut o = Overrides::default();
            o.value("metrics", args.metrics.as_ref());
            o.value("rel_threshold", args.rel_threshold);
            o.value("gain", args.gain.as_ref());
            if args.lenient {
                o.value("missing_topics", Some("lenient"));
            }
            o.apply(&mut config)?;
            let report = pipeline::cmd_eval(&args.run, &args.qrels, &config.eval_config(), config.max_grade)?;
            if let Some(path) = &args.json {
                write_out(path, &report.to_json())?;
            }
            match &args.output {
                Some(path) => write_out(path, &report.to_text())?,
                None => print!("{}", report.to_text()),
            }
        }
        Command::Compare(args) => {
            let alpha = args.alpha.unwrap_or(config.alpha);
            let m = args.m.or((config.m > 0).then_some(config.m));
            let reports = pipeline::cmd_compare(&args.systems, &args.baseline, alpha, m)?;
            let base = MetricReport::load(&args.baseline)?;
            let hash = base.header.get("config_hash").cloned().unwrap_or_default();
            print!("{}", pipeline::comparison_text(&reports, &hash));
            if let Some(path) = &args.json {
                write_out(path, &pipeline::comparison_json(&reports, &hash))?;
            }
        }
        Command::Pipeline(args) => {
            let mut o = Overrides::default();
            topic_overrides(&mut o, &args.topics);
            backend_overrides(&mut o, &args.backend);
            o.path("collection", &args.collection);
            o.path("index", &args.index);
            o.path("qrels", &args.qrels);
            o.value("templates", args.templates.as_ref());
            o.value("ranking_model", args.model.as_ref());
            o.value("k_first", args.k_first);
            o.value("rerank", args.rerank.as_ref());
            o.value("rerank_command", args.rerank_command.as_ref());
            o.path("out_dir", &args.out_dir);
            o.apply(&mut config)?;
            if args.print_config {
                print!("{}", config.to_text());
                println!("# hash {}", config.hash());
                return Ok(());
            }
            if config.rerank == RerankKind::External && config.rerank_command.is_none() {
                return Err(usage("rerank = external needs rerank_command"));
            }
            let summary = pipeline::cmd_pipeline(&config)?;
            for (name, report) in &summary.reports {
                let means: Vec<String> = report.means.iter().map(|(m, v)| format!("{m}={v:.4}")).collect();
                println!("{name:<16} {}", means.join("  "));
            }
            eprintln!(
                "{} backend calls; artifacts in {}",
                summary.backend_calls,
                summary.run_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
