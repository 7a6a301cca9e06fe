//! Commands behind the `archivist` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use archivist_core::annotation::{export_batch, human_labels, BlindingMap, StudyExport};
use archivist_core::backend::{CompletionBackend, ScriptedBackend, WireBackend};
use archivist_core::corpus::{build_indexes, load_corpus, Embedder, HashEmbedder, IndexBundle};
use archivist_core::dataset::{load_suite, TaskSuite};
use archivist_core::generation::{load_records, run_grid, GenerationRecord, GridOptions, GridSummary, Pipeline, RECORDS_FILE};
use archivist_core::metrics::{aggregate, parse_grouping, render_text, score_response, scores_csv, LabelSource, ResponseLabels};
use archivist_core::persona::{PersonaBackend, PersonaConfig};
use archivist_core::retrieval::{LexicalOverlapScorer, Lexicon, RerankScorer};
use archivist_core::verification::{verify_record, FidelityReport};
use archivist_core::wire::{WireClient, WireEmbedder, WireScorer};
use serde::Serialize;

use config::{BackendSpec, EmbedderSpec, RunConfig, ScorerSpec};

pub const BUNDLE_FILE: &str = "bundle.bin";
pub const INDEX_MANIFEST_FILE: &str = "index-manifest.json";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const LOCK_FILE: &str = ".archivist.lock";
pub const REPORTS_DIR: &str = "reports";
pub const ANNOTATION_DIR: &str = "annotation";
pub const BATCH_FILE: &str = "batch.json";
pub const BLINDING_MAP_FILE: &str = "blinding-map.json";
pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const INPUT: u8 = 2;
    pub const PARTIAL: u8 = 3;
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        CliError { code: exit::INPUT, error }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError { code: exit::USAGE, error: anyhow!(msg.into()) }
}

pub type CliResult<T> = Result<T, CliError>;

/// Held while a command writes into an output directory.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow!("{} is locked by another command ({}); remove it if no command is running", dir.display(), path.display())
            } else {
                anyhow!("{}: {e}", path.display())
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(OutputLock { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

pub struct RunContext {
    pub config: RunConfig,
    pub seed: u64,
    pub workers: usize,
}

pub fn load_config(path: &Path, o: &Overrides) -> CliResult<RunContext> {
    let config = RunConfig::load(path).map_err(|e| CliError { code: exit::INPUT, error: e.into() })?;
    let seed = o.seed.unwrap_or(config.seed);
    let workers = o.workers.unwrap_or(config.workers);
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    Ok(RunContext { config, seed, workers })
}

pub fn make_embedder(spec: &EmbedderSpec) -> anyhow::Result<Box<dyn Embedder>> {
    Ok(match spec {
        EmbedderSpec::Hash { dim } => Box::new(HashEmbedder::new(*dim)),
        EmbedderSpec::Wire { id, dim, endpoint } => {
            let client = WireClient::connect(endpoint).with_context(|| format!("connecting to embedder {id}"))?;
            Box::new(WireEmbedder::new(id, *dim, client))
        }
    })
}

pub fn make_scorer(spec: &ScorerSpec) -> anyhow::Result<Box<dyn RerankScorer>> {
    Ok(match spec {
        ScorerSpec::Lexical => Box::new(LexicalOverlapScorer),
        ScorerSpec::Wire { id, endpoint } => {
            let client = WireClient::connect(endpoint).with_context(|| format!("connecting to scorer {id}"))?;
            Box::new(WireScorer::new(id, client))
        }
    })
}

fn lexicon(cfg: &RunConfig) -> anyhow::Result<Lexicon> {
    match &cfg.lexicon {
        None => Ok(Lexicon::builtin()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Lexicon::from_yaml(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

pub fn make_backends(cfg: &RunConfig, bundle: Option<&IndexBundle>) -> anyhow::Result<Vec<Arc<dyn CompletionBackend>>> {
    let mut out: Vec<Arc<dyn CompletionBackend>> = Vec::new();
    for spec in &cfg.backends {
        let b: Arc<dyn CompletionBackend> = match spec {
            BackendSpec::Persona { id, path } => {
                let mut pc = match path {
                    Some(p) => {
                        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                        serde_yaml::from_str::<PersonaConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
                    }
                    None => PersonaConfig::new(id.as_deref().unwrap_or("persona")),
                };
                if let Some(id) = id {
                    pc.id = id.clone();
                }
                let bundle = bundle.ok_or_else(|| anyhow!("persona backend {} needs an index; run `archivist index` first", pc.id))?;
                Arc::new(PersonaBackend::new(pc, bundle)?)
            }
            BackendSpec::Script { path } => Arc::new(ScriptedBackend::load(path)?),
            BackendSpec::Wire(w) => Arc::new(WireBackend::from_env(w)?),
        };
        if out.iter().any(|o| o.id() == b.id()) {
            bail!("duplicate backend id {}", b.id());
        }
        out.push(b);
    }
    Ok(out)
}

fn load_bundle(cfg: &RunConfig, embedder: &dyn Embedder) -> anyhow::Result<Option<IndexBundle>> {
    let path = cfg.bundle_path();
    if !path.exists() {
        return Ok(None);
    }
    let bundle = IndexBundle::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if bundle.meta.embedder != embedder.id() || bundle.meta.dim != embedder.dim() {
        bail!(
            "{} was built with embedder {} ({} dims) but the config uses {} ({} dims); rerun `archivist index`",
            path.display(),
            bundle.meta.embedder,
            bundle.meta.dim,
            embedder.id(),
            embedder.dim()
        );
    }
    Ok(Some(bundle))
}

fn require_bundle(cfg: &RunConfig, embedder: &dyn Embedder) -> anyhow::Result<IndexBundle> {
    load_bundle(cfg, embedder)?.ok_or_else(|| anyhow!("no index at {}; run `archivist index` first", cfg.bundle_path().display()))
}

fn suite(cfg: &RunConfig) -> anyhow::Result<TaskSuite> {
    load_suite(&cfg.task_dir).with_context(|| format!("loading tasks from {}", cfg.task_dir.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateSummary {
    pub tasks: usize,
    pub categories: BTreeMap<String, usize>,
    pub documents: usize,
    pub backends: usize,
}

/// Checks the config, the task suite and the corpus without writing.
pub fn cmd_validate(cx: &RunContext) -> CliResult<ValidateSummary> {
    let cfg = &cx.config;
    let s = suite(cfg)?;
    let corpus = load_corpus(&cfg.corpus_dir).with_context(|| format!("loading corpus from {}", cfg.corpus_dir.display()))?;
    parse_grouping(&cfg.score.group_by.iter().map(String::as_str).collect::<Vec<_>>()).map_err(anyhow::Error::from)?;
    lexicon(cfg)?;
    Ok(ValidateSummary { tasks: s.len(), categories: s.category_histogram(), documents: corpus.docs.len(), backends: cfg.backends.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct IndexManifest {
    pub schema_version: u32,
    pub doc_count: usize,
    pub chunk_count: usize,
    pub chunks_per_doc: BTreeMap<String, usize>,
    pub embedder: String,
    pub dim: usize,
    pub checksum: String,
}

/// Builds the index bundle and its manifest. Nothing is written unless
/// the whole build succeeds.
pub fn cmd_index(cx: &RunContext) -> CliResult<IndexManifest> {
    let cfg = &cx.config;
    let corpus = load_corpus(&cfg.corpus_dir).with_context(|| format!("loading corpus from {}", cfg.corpus_dir.display()))?;
    let embedder = make_embedder(&cfg.index.embedder)?;
    let mut build = cfg.index.build.clone();
    if build.snapshot_date.is_none() {
        build.snapshot_date = corpus.snapshot_date;
    }
    let bundle = build_indexes(&corpus.docs, embedder.as_ref(), &build, None).map_err(anyhow::Error::from)?;
    let mut chunks_per_doc: BTreeMap<String, usize> = bundle.docs.keys().map(|d| (d.clone(), 0)).collect();
    for c in bundle.chunks.values() {
        *chunks_per_doc.entry(c.doc_id.clone()).or_default() += 1;
    }
    let manifest = IndexManifest {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        doc_count: bundle.meta.doc_count,
        chunk_count: bundle.meta.chunk_count,
        chunks_per_doc,
        embedder: bundle.meta.embedder.clone(),
        dim: bundle.meta.dim,
        checksum: bundle.checksum(),
    };
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    bundle.save(&cfg.bundle_path()).map_err(anyhow::Error::from)?;
    write_json(&cfg.output_dir.join(INDEX_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

/// Runs or resumes the grid.
pub fn cmd_run(cx: &RunContext, stop_after: Option<usize>) -> CliResult<GridSummary> {
    let cfg = &cx.config;
    let s = suite(cfg)?;
    let embedder = make_embedder(&cfg.index.embedder)?;
    let bundle = load_bundle(cfg, embedder.as_ref())?;
    if bundle.is_none() && cfg.grid.conditions.iter().any(|c| c.uses_retrieval()) {
        return Err(anyhow!("retrieval conditions need an index at {}; run `archivist index` first", cfg.bundle_path().display()).into());
    }
    let backends = make_backends(cfg, bundle.as_ref())?;
    if backends.is_empty() {
        return Err(anyhow!("config lists no backends").into());
    }
    let scorer = make_scorer(&cfg.scorer)?;
    let lex = lexicon(cfg)?;
    let pipeline = Pipeline {
        bundle: bundle.as_ref(),
        embedder: embedder.as_ref(),
        scorer: scorer.as_ref(),
        lexicon: &lex,
        config: &cfg.pipeline,
    };
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let summary = run_grid(&s, &backends, &cfg.grid_spec(cx.seed), &pipeline, &cfg.output_dir, &GridOptions { workers: cx.workers, stop_after }).map_err(anyhow::Error::from)?;
    Ok(summary)
}

fn records(cfg: &RunConfig) -> anyhow::Result<Vec<GenerationRecord>> {
    let path = cfg.output_dir.join(RECORDS_FILE);
    if !path.exists() {
        bail!("no records at {}; run `archivist run` first", path.display());
    }
    Ok(load_records(&path)?)
}

/// Machine verdicts for every record, in record order.
pub fn cmd_verify(cx: &RunContext) -> CliResult<Vec<FidelityReport>> {
    let cfg = &cx.config;
    let recs = records(cfg)?;
    let s = suite(cfg)?;
    let embedder = make_embedder(&cfg.index.embedder)?;
    let bundle = require_bundle(cfg, embedder.as_ref())?;
    let scorer = make_scorer(&cfg.scorer)?;
    let mut reports = Vec::with_capacity(recs.len());
    for r in &recs {
        let task = s.get(&r.cell.task_id).ok_or_else(|| anyhow!("record {} names unknown task {}", r.record_id, r.cell.task_id))?;
        reports.push(verify_record(r, task, &bundle, scorer.as_ref(), cfg.pipeline.verify).map_err(anyhow::Error::from)?);
    }
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let lines: Vec<String> = reports.iter().map(|r| serde_json::to_string(r).expect("report serializes")).collect();
    archivist_core::generation::write_lines_atomic(&cfg.output_dir.join(VERDICTS_FILE), lines).map_err(anyhow::Error::from)?;
    Ok(reports)
}

fn load_verdicts(cfg: &RunConfig) -> anyhow::Result<BTreeMap<String, FidelityReport>> {
    let path = cfg.output_dir.join(VERDICTS_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("no verdicts at {}; run `archivist verify` first", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: FidelityReport = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.insert(r.record_id.clone(), r);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ScoreOutput {
    pub report: archivist_core::metrics::AggregateReport,
    pub text: String,
    pub json_path: PathBuf,
    pub text_path: PathBuf,
    pub csv_path: PathBuf,
}

/// Scores every record from one label source and writes the reports.
pub fn cmd_score(cx: &RunContext, source: LabelSource, export: Option<&Path>, map: Option<&Path>) -> CliResult<ScoreOutput> {
    let cfg = &cx.config;
    let recs = records(cfg)?;
    let s = suite(cfg)?;
    let grouping = parse_grouping(&cfg.score.group_by.iter().map(String::as_str).collect::<Vec<_>>()).map_err(|e| usage(e.to_string()))?;
    let labels: Vec<ResponseLabels> = match source {
        LabelSource::Machine => load_verdicts(cfg)?.values().map(ResponseLabels::from_report).collect(),
        LabelSource::Human => {
            let export = export.map(Path::to_path_buf).or_else(|| cfg.annotation.export.clone()).ok_or_else(|| {
                usage("human scoring needs a study export (--annotations or annotation.export)")
            })?;
            let map_path = map
                .map(Path::to_path_buf)
                .or_else(|| cfg.annotation.blinding_map.clone())
                .unwrap_or_else(|| cfg.output_dir.join(ANNOTATION_DIR).join(BLINDING_MAP_FILE));
            let ex: StudyExport = read_json(&export)?;
            let bm: BlindingMap = read_json(&map_path)?;
            if ex.batch_id != bm.batch_id {
                return Err(anyhow!("export is for batch {} but the blinding map is for {}", ex.batch_id, bm.batch_id).into());
            }
            human_labels(&ex, &bm, cfg.score.likert_rule)
        }
    };
    let by_record: BTreeMap<&str, &GenerationRecord> = recs.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let mut scored = Vec::new();
    for l in &labels {
        let Some(rec) = by_record.get(l.record_id.as_str()) else {
            tracing::warn!(record = %l.record_id, "labels for an unknown record skipped");
            continue;
        };
        let task = s.get(&rec.cell.task_id).ok_or_else(|| anyhow!("unknown task {}", rec.cell.task_id))?;
        scored.push((rec.cell.clone(), score_response(l, &task.gold_standard, cfg.score.k, source).map_err(anyhow::Error::from)?));
    }
    if scored.is_empty() {
        return Err(anyhow!("no labelled records to score").into());
    }
    scored.sort_by(|a, b| a.0.cell_id().cmp(&b.0.cell_id()));
    let report = aggregate(&scored, &grouping, cfg.score.k).map_err(anyhow::Error::from)?;
    let text = render_text(&report);
    let dir = cfg.output_dir.join(REPORTS_DIR);
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let tag = match source {
        LabelSource::Machine => "machine",
        LabelSource::Human => "human",
    };
    let json_path = dir.join(format!("aggregate-{tag}.json"));
    let text_path = dir.join(format!("aggregate-{tag}.txt"));
    let csv_path = dir.join(format!("scores-{tag}.csv"));
    write_json(&json_path, &report)?;
    fs::write(&text_path, &text).with_context(|| format!("writing {}", text_path.display()))?;
    fs::write(&csv_path, scores_csv(&scored).map_err(anyhow::Error::from)?).with_context(|| format!("writing {}", csv_path.display()))?;
    Ok(ScoreOutput { report, text, json_path, text_path, csv_path })
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct ExportOutput {
    pub batch_path: PathBuf,
    pub map_path: PathBuf,
    pub items: usize,
    pub assignments: usize,
}

/// Writes the blinded batch and, in a separate owner-only file, the map
/// back to records.
pub fn cmd_export_annotation(cx: &RunContext) -> CliResult<ExportOutput> {
    let cfg = &cx.config;
    if cfg.annotation.annotators.len() < 2 {
        return Err(anyhow!("annotation.annotators lists {} annotators; at least 2 are needed", cfg.annotation.annotators.len()).into());
    }
    let recs = records(cfg)?;
    let reports = load_verdicts(cfg)?;
    let s = suite(cfg)?;
    let (batch, map) = export_batch(&recs, &reports, &s, &cfg.annotation.annotators, cx.seed).map_err(anyhow::Error::from)?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let dir = cfg.output_dir.join(ANNOTATION_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let batch_path = dir.join(BATCH_FILE);
    let map_path = dir.join(BLINDING_MAP_FILE);
    write_json(&batch_path, &batch)?;
    write_private(&map_path, &(serde_json::to_string_pretty(&map).map_err(anyhow::Error::from)? + "\n"))?;
    Ok(ExportOutput { batch_path, map_path, items: batch.items.len(), assignments: batch.assignments.len() })
}

fn write_private(path: &Path, text: &str) -> anyhow::Result<()> {
    let _ = fs::remove_file(path);
    let mut opts = OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f: File = opts.open(path).with_context(|| format!("writing {}", path.display()))?;
    f.write_all(text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Serves the annotation API until interrupted.
pub fn cmd_serve(cx: &RunContext, addr: Option<&str>) -> CliResult<()> {
    let cfg = &cx.config;
    let token = std::env::var(&cfg.serve.admin_token_env)
        .map_err(|_| anyhow!("set {} to the admin token before serving", cfg.serve.admin_token_env))?;
    if token.trim().len() < 8 {
        return Err(anyhow!("the admin token must be at least 8 characters").into());
    }
    let dir = cfg.output_dir.join("annotation-store");
    let store = archivist_annotate::Store::open(&dir, cfg.serve.snapshot_every, Arc::new(chrono_now))
        .map_err(|e| anyhow!("opening {}: {e}", dir.display()))?;
    let state = archivist_annotate::AppState { store: Arc::new(store), admin_token: Arc::new(token) };
    let addr = addr.unwrap_or(&cfg.serve.addr).to_string();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(anyhow::Error::from)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        println!("annotation service listening on {}", listener.local_addr()?);
        archivist_annotate::serve(listener, state).await?;
        anyhow::Ok(())
    })?;
    Ok(())
}

fn chrono_now() -> chrono::DateTime<chrono::Utc> {
    chrono::Utc::now()
}

/// Serves the lexical scorer and the hash embedder over the line protocol
/// on stdin/stdout, for wiring tests and as a reference peer.
pub fn cmd_wire_peer(dim: usize) -> CliResult<()> {
    let e = HashEmbedder::new(dim);
    let stdin = std::io::stdin();
    archivist_core::wire::serve_lines(stdin.lock(), std::io::stdout(), Some(&LexicalOverlapScorer), Some(&e)).map_err(anyhow::Error::from)?;
    Ok(())
}
