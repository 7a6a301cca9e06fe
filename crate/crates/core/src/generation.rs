//! Experiment cells, the per-condition generation pipeline and the
//! resumable grid runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, CompletionBackend};
use crate::corpus::{Embedder, IndexBundle};
use crate::dataset::{Task, TaskSuite};
use crate::prompt::{self, PromptError};
use crate::retrieval::{self, Lexicon, RankedContext, RerankScorer, RetrievalConfig, RetrievalError};
use crate::verification::{self, FidelityReport, LoopParams, LoopSummary, VerifyContext, VerifyParams};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Direct,
    CanonicalRag,
    AdvancedRag,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Direct, Condition::CanonicalRag, Condition::AdvancedRag];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Direct => "direct",
            Condition::CanonicalRag => "canonical-rag",
            Condition::AdvancedRag => "advanced-rag",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        self != Condition::Direct
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Condition::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown condition {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    Neutral,
    Verification,
}

impl Template {
    pub const ALL: [Template; 2] = [Template::Neutral, Template::Verification];

    pub fn as_str(self) -> &'static str {
        match self {
            Template::Neutral => "neutral",
            Template::Verification => "verification",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Template {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Template::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown template {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub task_id: String,
    pub backend_id: String,
    pub condition: Condition,
    pub temperature: f64,
    pub template: Template,
    pub seed: u64,
}

impl ExperimentCell {
    pub fn new(task_id: &str, backend_id: &str, condition: Condition, temperature: f64, template: Template, master_seed: u64) -> Self {
        let mut c = ExperimentCell {
            task_id: task_id.to_string(),
            backend_id: backend_id.to_string(),
            condition,
            temperature,
            template,
            seed: 0,
        };
        c.seed = cell_seed(master_seed, &c);
        c
    }

    /// `task|backend|condition|temperature|template`; independent of the seed.
    pub fn cell_id(&self) -> String {
        format!("{}|{}|{}|{}|{}", self.task_id, self.backend_id, self.condition, self.temperature, self.template)
    }
}

/// Seed of a cell: the first 8 bytes, big-endian, of
/// SHA-256(`archivist-cell-seed/v1|{master}|{cell_id}`).
pub fn cell_seed(master_seed: u64, cell: &ExperimentCell) -> u64 {
    let digest = Sha256::digest(format!("archivist-cell-seed/v1|{master_seed}|{}", cell.cell_id()).as_bytes());
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

fn record_id(cell: &ExperimentCell) -> String {
    let digest = Sha256::digest(format!("archivist-record/v1|{}|{}", cell.cell_id(), cell.seed).as_bytes());
    format!("rec-{}", hex::encode(&digest[..8]))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub backend_calls: u32,
    pub prompt_chars: usize,
    pub output_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub schema_version: u32,
    pub record_id: String,
    pub cell: ExperimentCell,
    pub prompt: String,
    pub output: String,
    /// Prompt order, so `S1` is the first entry.
    pub context_chunk_ids: Vec<String>,
    pub timing: Timing,
    pub correction_cycles: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<LoopSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub verify: VerifyParams,
    #[serde(default, rename = "loop")]
    pub correction: LoopParams,
    /// Ask the backend to decompose the query instead of splitting it
    /// heuristically.
    #[serde(default)]
    pub decompose_with_backend: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retrieval: RetrievalConfig::default(),
            verify: VerifyParams::default(),
            correction: LoopParams::default(),
            decompose_with_backend: false,
        }
    }
}

/// Shared, read-only resources for running cells.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub bundle: Option<&'a IndexBundle>,
    pub embedder: &'a dyn Embedder,
    pub scorer: &'a dyn RerankScorer,
    pub lexicon: &'a Lexicon,
    pub config: &'a PipelineConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum CellErrorKind {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Loop(#[from] verification::LoopError),
    #[error("condition {0} needs an index bundle")]
    MissingBundle(Condition),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown backend {0}")]
    UnknownBackend(String),
}

#[derive(Debug, thiserror::Error)]
#[error("cell {cell_id}: {kind}")]
pub struct CellError {
    pub cell_id: String,
    pub kind: CellErrorKind,
    /// Record reached before a mid-loop failure.
    pub partial: Option<Box<GenerationRecord>>,
}

#[derive(Debug)]
pub struct CellOutcome {
    pub record: GenerationRecord,
    /// Set when the condition ran the verification loop.
    pub report: Option<FidelityReport>,
}

fn retrieve(task: &Task, bundle: &IndexBundle, backend: &dyn CompletionBackend, p: &Pipeline, advanced: bool) -> Result<RankedContext, RetrievalError> {
    let cfg = &p.config.retrieval;
    let decomposer = p.config.decompose_with_backend.then_some(backend);
    let plan = retrieval::plan_query(&task.scenario, decomposer, p.lexicon);
    let mut hybrid = cfg.hybrid.clone();
    if advanced {
        hybrid.k_per_engine = hybrid.k_per_engine.max(cfg.rerank_n);
    }
    let candidates = retrieval::retrieve_hybrid(&plan, bundle, p.embedder, &hybrid)?;
    let fused = retrieval::rrf_fuse(candidates, cfg.k_rrf)?;
    if !advanced {
        return retrieval::top_fused(&fused, bundle, cfg.canonical_top);
    }
    let ranked = retrieval::rerank(&task.scenario, &fused, bundle, p.scorer, cfg.rerank_n, cfg.rerank_m)?;
    retrieval::compress_context(&task.scenario, &ranked, p.scorer, cfg.char_budget)
}

/// Runs one cell: Direct sends the bare prompt; canonical RAG attaches the
/// top fused chunks; advanced RAG reranks, compresses and then runs the
/// verification loop on the draft.
pub fn run_cell(cell: &ExperimentCell, task: &Task, backend: &dyn CompletionBackend, p: &Pipeline) -> Result<CellOutcome, CellError> {
    let fail = |kind: CellErrorKind| CellError { cell_id: cell.cell_id(), kind, partial: None };
    let context = if cell.condition.uses_retrieval() {
        let bundle = p.bundle.ok_or_else(|| fail(CellErrorKind::MissingBundle(cell.condition)))?;
        Some(retrieve(task, bundle, backend, p, cell.condition == Condition::AdvancedRag).map_err(|e| fail(e.into()))?)
    } else {
        None
    };
    let prompt_text = prompt::build_prompt(task, cell.condition, cell.template, context.as_ref()).map_err(|e| fail(e.into()))?;
    let output = backend.generate(&prompt_text, cell.temperature, cell.seed).map_err(|e| fail(e.into()))?;
    let record = GenerationRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        record_id: record_id(cell),
        cell: cell.clone(),
        timing: Timing { backend_calls: 1, prompt_chars: prompt_text.chars().count(), output_chars: output.chars().count() },
        prompt: prompt_text,
        output,
        context_chunk_ids: context.as_ref().map(|c| c.chunk_ids()).unwrap_or_default(),
        correction_cycles: 0,
        correction: None,
    };
    if cell.condition != Condition::AdvancedRag {
        return Ok(CellOutcome { record, report: None });
    }
    let bundle = p.bundle.expect("checked above");
    let cx = VerifyContext {
        task,
        bundle,
        context_chunk_ids: &record.context_chunk_ids,
        scorer: p.scorer,
        params: p.config.verify,
        origin: cell.condition.into(),
    };
    match verification::fidelity_and_correct(&record, backend, &cx, &p.config.correction) {
        Ok(mut out) => {
            out.record.timing.output_chars = out.record.output.chars().count();
            Ok(CellOutcome { record: out.record, report: Some(out.report) })
        }
        Err(f) => Err(CellError { cell_id: cell.cell_id(), kind: CellErrorKind::Loop(f.error), partial: Some(Box::new(f.partial.record)) }),
    }
}

/// Axes of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub conditions: Vec<Condition>,
    pub temperatures: Vec<f64>,
    pub templates: Vec<Template>,
    pub master_seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            conditions: Condition::ALL.to_vec(),
            temperatures: vec![0.1, 0.7],
            templates: Template::ALL.to_vec(),
            master_seed: 0,
        }
    }
}

/// The full cross-product, sorted by task, backend, condition,
/// temperature and template. Duplicate axis values are collapsed.
pub fn grid_cells(task_ids: &[&str], backend_ids: &[&str], spec: &GridSpec) -> Vec<ExperimentCell> {
    let tasks: BTreeSet<&str> = task_ids.iter().copied().collect();
    let backends: BTreeSet<&str> = backend_ids.iter().copied().collect();
    let conditions: BTreeSet<Condition> = spec.conditions.iter().copied().collect();
    let templates: BTreeSet<Template> = spec.templates.iter().copied().collect();
    let mut temps = spec.temperatures.clone();
    temps.sort_by(f64::total_cmp);
    temps.dedup();
    let mut cells = Vec::new();
    for t in &tasks {
        for b in &backends {
            for c in &conditions {
                for temp in &temps {
                    for tpl in &templates {
                        cells.push(ExperimentCell::new(t, b, *c, *temp, *tpl, spec.master_seed));
                    }
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LedgerStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub schema_version: u32,
    pub cell_id: String,
    pub status: LedgerStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct TimingLine<'a> {
    cell_id: &'a str,
    wall_ms: u128,
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const REPORTS_FILE: &str = "fidelity.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    pub workers: usize,
    /// Stop after this many cells have been attempted in this run, as if
    /// interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GridSummary {
    pub total: usize,
    pub new: usize,
    pub skipped: usize,
    pub failed: usize,
    pub interrupted: bool,
    pub failures: Vec<(String, String)>,
}

impl GridSummary {
    pub fn is_complete(&self) -> bool {
        !self.interrupted && self.failed == 0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("empty grid: {0}")]
    Empty(&'static str),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> GridError + '_ {
    move |source| GridError::Io { path: path.to_path_buf(), source }
}

/// Reads a JSONL file keyed by `key`; later lines win. A missing file is
/// empty. A truncated last line (from an interrupted write) is ignored.
fn read_keyed(path: &Path, key: &str) -> Result<BTreeMap<String, String>, GridError> {
    let mut out = BTreeMap::new();
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(f).lines().collect::<Result<_, _>>().map_err(io_err(path))?;
    let n = lines.len();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) if i + 1 == n => continue,
            Err(e) => return Err(GridError::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() }),
        };
        let id = match key {
            "cell_id" => v.get("cell_id").and_then(|x| x.as_str()).map(str::to_string),
            _ => serde_json::from_value::<GenerationRecord>(v.clone()).ok().map(|r| r.cell.cell_id()),
        };
        let id = id.ok_or_else(|| GridError::Parse { path: path.to_path_buf(), line: i + 1, message: format!("line lacks {key}") })?;
        out.insert(id, line);
    }
    Ok(out)
}

fn append_line(path: &Path, line: &str) -> Result<(), GridError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

/// Writes `lines` to `path` atomically via a sibling temp file.
pub fn write_lines_atomic(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<(), GridError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        for l in lines {
            writeln!(f, "{l}").map_err(io_err(&tmp))?;
        }
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn canonical_order(cells: &[ExperimentCell], mut lines: BTreeMap<String, String>) -> Vec<String> {
    let mut out: Vec<String> = cells.iter().filter_map(|c| lines.remove(&c.cell_id())).collect();
    out.extend(lines.into_values());
    out
}

/// Runs every cell of the grid not yet marked done in the ledger under
/// `out_dir`, appending records as they finish. Failed cells are recorded
/// and retried on the next run. On return the record, report and ledger
/// files are rewritten in grid order, so equal inputs give equal files
/// however the run was interrupted.
pub fn run_grid(
    suite: &TaskSuite,
    backends: &[Arc<dyn CompletionBackend>],
    spec: &GridSpec,
    pipeline: &Pipeline,
    out_dir: &Path,
    opts: &GridOptions,
) -> Result<GridSummary, GridError> {
    if suite.is_empty() {
        return Err(GridError::Empty("no tasks"));
    }
    if backends.is_empty() {
        return Err(GridError::Empty("no backends"));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let records_path = out_dir.join(RECORDS_FILE);
    let ledger_path = out_dir.join(LEDGER_FILE);
    let reports_path = out_dir.join(REPORTS_FILE);
    let timings_path = out_dir.join(TIMINGS_FILE);

    let task_ids: Vec<&str> = suite.tasks().iter().map(|t| t.id.as_str()).collect();
    let backend_ids: Vec<&str> = backends.iter().map(|b| b.id()).collect();
    let by_id: BTreeMap<&str, &Arc<dyn CompletionBackend>> = backends.iter().map(|b| (b.id(), b)).collect();
    let by_id = &by_id;
    let cells = grid_cells(&task_ids, &backend_ids, spec);

    let ledger = read_keyed(&ledger_path, "cell_id")?;
    let done: BTreeSet<String> = ledger
        .iter()
        .filter(|(_, l)| serde_json::from_str::<LedgerEntry>(l).is_ok_and(|e| e.status == LedgerStatus::Done))
        .map(|(k, _)| k.clone())
        .collect();
    let pending: Vec<&ExperimentCell> = cells.iter().filter(|c| !done.contains(&c.cell_id())).collect();
    let mut summary = GridSummary { total: cells.len(), skipped: cells.len() - pending.len(), ..Default::default() };
    let budget = opts.stop_after.unwrap_or(usize::MAX);
    let todo = &pending[..pending.len().min(budget)];
    summary.interrupted = todo.len() < pending.len();

    let workers = opts.workers.max(1);
    for batch in todo.chunks(workers) {
        let results: Vec<(Result<CellOutcome, CellError>, u128)> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|cell| {
                    s.spawn(move || {
                        let started = Instant::now();
                        let r = match (suite.get(&cell.task_id), by_id.get(cell.backend_id.as_str())) {
                            (Some(task), Some(b)) => run_cell(cell, task, b.as_ref(), pipeline),
                            (None, _) => Err(CellError { cell_id: cell.cell_id(), kind: CellErrorKind::UnknownTask(cell.task_id.clone()), partial: None }),
                            (_, None) => Err(CellError { cell_id: cell.cell_id(), kind: CellErrorKind::UnknownBackend(cell.backend_id.clone()), partial: None }),
                        };
                        (r, started.elapsed().as_millis())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("cell worker panicked")).collect()
        });
        for (cell, (result, wall_ms)) in batch.iter().zip(results) {
            let cell_id = cell.cell_id();
            let entry = match result {
                Ok(outcome) => {
                    append_line(&records_path, &serde_json::to_string(&outcome.record).expect("record serializes"))?;
                    if let Some(rep) = &outcome.report {
                        append_line(&reports_path, &serde_json::to_string(rep).expect("report serializes"))?;
                    }
                    summary.new += 1;
                    LedgerEntry { schema_version: RECORD_SCHEMA_VERSION, cell_id: cell_id.clone(), status: LedgerStatus::Done, record_id: Some(outcome.record.record_id), error: None }
                }
                Err(e) => {
                    tracing::warn!(cell = %cell_id, error = %e.kind, "cell failed");
                    summary.failed += 1;
                    summary.failures.push((cell_id.clone(), e.kind.to_string()));
                    LedgerEntry { schema_version: RECORD_SCHEMA_VERSION, cell_id: cell_id.clone(), status: LedgerStatus::Failed, record_id: None, error: Some(e.kind.to_string()) }
                }
            };
            append_line(&ledger_path, &serde_json::to_string(&entry).expect("ledger entry serializes"))?;
            append_line(&timings_path, &serde_json::to_string(&TimingLine { cell_id: &cell_id, wall_ms }).expect("timing serializes"))?;
        }
    }

    let records = read_keyed(&records_path, "record")?;
    let ledger = read_keyed(&ledger_path, "cell_id")?;
    let order: BTreeMap<String, String> = records
        .iter()
        .filter_map(|(cell, line)| serde_json::from_str::<GenerationRecord>(line).ok().map(|r| (r.record_id, cell.clone())))
        .collect();
    let reports = read_reports(&reports_path)?
        .into_iter()
        .filter_map(|(rid, line)| order.get(&rid).map(|cell| (cell.clone(), line)))
        .collect();
    write_lines_atomic(&records_path, canonical_order(&cells, records))?;
    write_lines_atomic(&ledger_path, canonical_order(&cells, ledger))?;
    if reports_path.exists() {
        write_lines_atomic(&reports_path, canonical_order(&cells, reports))?;
    }
    Ok(summary)
}

fn read_reports(path: &Path) -> Result<BTreeMap<String, String>, GridError> {
    let mut out = BTreeMap::new();
    let Ok(f) = File::open(path) else {
        return Ok(out);
    };
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if let Ok(r) = serde_json::from_str::<FidelityReport>(&line) {
            out.insert(r.record_id.clone(), line);
        }
    }
    Ok(out)
}

/// Loads a records JSONL file.
pub fn load_records(path: &Path) -> Result<Vec<GenerationRecord>, GridError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: GenerationRecord = serde_json::from_str(&line)
            .map_err(|e| GridError::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        if r.schema_version != RECORD_SCHEMA_VERSION {
            return Err(GridError::Parse { path: path.to_path_buf(), line: i + 1, message: format!("unsupported schema version {}", r.schema_version) });
        }
        out.push(r);
    }
    Ok(out)
}
