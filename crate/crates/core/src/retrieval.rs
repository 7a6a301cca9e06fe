//! Query planning, hybrid retrieval, rank fusion, re-ranking and context
//! compression.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::CompletionBackend;
use crate::citation::parse_citations;
use crate::corpus::{CorpusError, Embedder, IndexBundle};
use crate::text;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("empty bundle")]
    EmptyBundle,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("scorer failed on chunk {chunk_id}: {message}")]
    Scorer { chunk_id: String, message: String },
    #[error("budget infeasible: {budget} chars is below the shortest sentence ({shortest} chars)")]
    BudgetInfeasible { budget: usize, shortest: usize },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("unknown chunk {0}")]
    UnknownChunk(String),
}

/// Synonym table used for query expansion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon(pub BTreeMap<String, Vec<String>>);

const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.yaml");

impl Lexicon {
    pub fn builtin() -> Self {
        Self::from_yaml(BUILTIN_LEXICON).expect("builtin lexicon parses")
    }

    pub fn from_yaml(text: &str) -> Result<Self, serde_yaml::Error> {
        let raw: BTreeMap<String, Vec<String>> = serde_yaml::from_str(text)?;
        Ok(Lexicon(raw.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect()))
    }

    /// Synonyms of terms in `query` that the query does not already contain.
    pub fn expand(&self, query: &str) -> Vec<String> {
        let lower = format!(" {} ", text::tokenize(query).join(" "));
        let mut out: Vec<String> = Vec::new();
        for (key, syns) in &self.0 {
            if !lower.contains(&format!(" {key} ")) {
                continue;
            }
            for s in syns {
                let s = s.to_lowercase();
                if !lower.contains(&format!(" {s} ")) && !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub original: String,
    /// The original query comes first.
    pub sub_queries: Vec<String>,
    /// Expansion terms, parallel to `sub_queries`.
    pub expansions: Vec<Vec<String>>,
}

impl QueryPlan {
    fn new(original: &str, parts: Vec<String>, lexicon: &Lexicon) -> Self {
        let mut subs = vec![original.trim().to_string()];
        for p in parts {
            if !p.is_empty() && !subs.contains(&p) {
                subs.push(p);
            }
        }
        let expansions = subs.iter().map(|s| lexicon.expand(s)).collect();
        QueryPlan { original: original.trim().to_string(), sub_queries: subs, expansions }
    }

    /// Sub-query text with its expansion terms appended.
    pub fn expanded(&self, i: usize) -> String {
        let mut s = self.sub_queries[i].clone();
        for e in &self.expansions[i] {
            s.push(' ');
            s.push_str(e);
        }
        s
    }
}

static SPLIT_MARKERS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i);|\s+y\s+además\s+|\s+y\s+también\s+|\s+y\s+asimismo\s+|,?\s+así\s+como\s+|\.\s+asimismo,?\s+|\.\s+además,?\s+|(?:^|\s)(?:\d{1,2}|[a-h])\)\s+")
        .unwrap()
});

fn clean_part(s: &str) -> String {
    s.trim().trim_matches(|c: char| matches!(c, '¿' | '?' | '.' | ',' | ':' | ';') || c.is_whitespace()).to_string()
}

/// Splits on compound coordinators ("y además", "así como"...), semicolons
/// and enumeration markers (`1)`, `a)`). Bare "y" is left alone.
pub fn heuristic_split(query: &str) -> Vec<String> {
    let parts: Vec<String> = SPLIT_MARKERS.split(query).map(clean_part).filter(|p| !p.is_empty()).collect();
    if parts.len() < 2 {
        Vec::new()
    } else {
        parts
    }
}

pub const DECOMPOSITION_PROMPT: &str = "Descompón la siguiente consulta jurídica en subpreguntas simples e independientes. \
Responde únicamente con una lista JSON de cadenas.\n\nConsulta: ";

fn parse_decomposition(output: &str) -> Option<Vec<String>> {
    let trimmed = output.trim();
    let json_part = trimmed.find('[').and_then(|a| trimmed.rfind(']').map(|b| &trimmed[a..=b]));
    if let Some(items) = json_part.and_then(|j| serde_json::from_str::<Vec<String>>(j).ok()) {
        let items: Vec<String> = items.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        return (!items.is_empty()).then_some(items);
    }
    static ITEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:[-*•]|\d+[.)])\s+(.+)$").unwrap());
    let items: Vec<String> =
        trimmed.lines().filter_map(|l| ITEM.captures(l).map(|c| c[1].trim().to_string())).collect();
    (!items.is_empty()).then_some(items)
}

/// Builds a plan whose sub-queries come from the backend's decomposition
/// when one is given and its answer parses, otherwise from
/// [`heuristic_split`]. The original query is always the first sub-query.
pub fn plan_query(query: &str, backend: Option<&dyn CompletionBackend>, lexicon: &Lexicon) -> QueryPlan {
    let from_backend = backend.and_then(|b| match b.generate(&format!("{DECOMPOSITION_PROMPT}{}", query.trim()), 0.0, 0) {
        Ok(out) => {
            let parsed = parse_decomposition(&out);
            if parsed.is_none() {
                tracing::warn!(backend = b.id(), "unparseable decomposition, using heuristic split");
            }
            parsed
        }
        Err(e) => {
            tracing::warn!(error = %e, "decomposition failed, using heuristic split");
            None
        }
    });
    let parts = from_backend.unwrap_or_else(|| heuristic_split(query));
    QueryPlan::new(query, parts, lexicon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Dense,
    Sparse,
    Graph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub chunk_id: String,
    /// 1-based rank per engine that returned the chunk.
    pub ranks: BTreeMap<Engine, usize>,
    pub fused_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridParams {
    pub k_per_engine: usize,
    pub graph_depth: usize,
}

impl Default for HybridParams {
    fn default() -> Self {
        HybridParams { k_per_engine: 20, graph_depth: 1 }
    }
}

fn merge_best(into: &mut BTreeMap<String, usize>, ranked: impl IntoIterator<Item = String>) {
    for (i, id) in ranked.into_iter().enumerate() {
        let r = i + 1;
        into.entry(id).and_modify(|b| *b = (*b).min(r)).or_insert(r);
    }
}

/// Graph engine ranking for one sub-query: chunks of the sources it
/// names, then of their neighbours, ordered by (distance, chunk id).
fn graph_ranked(sub: &str, bundle: &IndexBundle, params: &HybridParams) -> Vec<String> {
    let mut dist: BTreeMap<String, usize> = BTreeMap::new();
    for key in parse_citations(sub) {
        let Some(node) = bundle.graph.resolve(&key) else { continue };
        let mut reach = bundle.graph.neighbors_with_distance(&node, params.graph_depth).unwrap_or_default();
        reach.insert(node, 0);
        for (n, d) in reach {
            for c in bundle.chunks_of_node(&n) {
                dist.entry(c.chunk_id.clone()).and_modify(|x| *x = (*x).min(d)).or_insert(d);
            }
        }
    }
    let mut v: Vec<(usize, String)> = dist.into_iter().map(|(c, d)| (d, c)).collect();
    v.sort();
    v.into_iter().take(params.k_per_engine).map(|(_, c)| c).collect()
}

/// Runs dense, sparse and graph retrieval for every sub-query and merges
/// each engine's lists across sub-queries by best rank. Fused scores are
/// left at zero for [`rrf_fuse`]. Candidates come back in chunk-id order.
pub fn retrieve_hybrid(
    plan: &QueryPlan,
    bundle: &IndexBundle,
    embedder: &dyn Embedder,
    params: &HybridParams,
) -> Result<Vec<RetrievalCandidate>, RetrievalError> {
    if bundle.chunks.is_empty() {
        return Err(RetrievalError::EmptyBundle);
    }
    let mut per_engine: BTreeMap<Engine, BTreeMap<String, usize>> = BTreeMap::new();
    for i in 0..plan.sub_queries.len() {
        let q = plan.expanded(i);
        let qv = embedder.embed(&q).map_err(CorpusError::from)?;
        let dense = bundle.dense.knn(&qv, params.k_per_engine)?;
        merge_best(per_engine.entry(Engine::Dense).or_default(), dense.into_iter().map(|(c, _)| c));
        let sparse = bundle.sparse.top_k(&text::tokenize(&q), params.k_per_engine);
        merge_best(per_engine.entry(Engine::Sparse).or_default(), sparse.into_iter().map(|(c, _)| c));
        let graph = graph_ranked(&plan.sub_queries[i], bundle, params);
        merge_best(per_engine.entry(Engine::Graph).or_default(), graph);
    }
    let mut out: BTreeMap<String, RetrievalCandidate> = BTreeMap::new();
    for (engine, ranks) in per_engine {
        for (chunk, rank) in ranks {
            out.entry(chunk.clone())
                .or_insert_with(|| RetrievalCandidate { chunk_id: chunk, ranks: BTreeMap::new(), fused_score: 0.0 })
                .ranks
                .insert(engine, rank);
        }
    }
    Ok(out.into_values().collect())
}

pub const DEFAULT_K_RRF: f64 = 60.0;

/// Reciprocal rank fusion: score = Σ 1/(k_rrf + rank). Sorted by score
/// descending, ties by ascending chunk id.
pub fn rrf_fuse(mut candidates: Vec<RetrievalCandidate>, k_rrf: f64) -> Result<Vec<RetrievalCandidate>, RetrievalError> {
    if !(k_rrf > 0.0) {
        return Err(RetrievalError::Params(format!("k_rrf must be positive, got {k_rrf}")));
    }
    for c in &mut candidates {
        c.fused_score = c.ranks.values().map(|&r| 1.0 / (k_rrf + r as f64)).sum();
    }
    candidates.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
    Ok(candidates)
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct ScorerError(pub String);

/// Relevance of a text to a query. Implementations must be pure.
pub trait RerankScorer: Send + Sync {
    fn id(&self) -> String;
    fn score(&self, query: &str, text: &str) -> Result<f64, ScorerError>;
}

/// Fraction of the query's content terms that occur in the text.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapScorer;

impl RerankScorer for LexicalOverlapScorer {
    fn id(&self) -> String {
        "lexical-overlap".into()
    }
    fn score(&self, query: &str, text: &str) -> Result<f64, ScorerError> {
        Ok(text::overlap_ratio(query, text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub chunk_id: String,
    pub doc_id: String,
    /// Citation or title of the source document.
    pub source: String,
    /// The source was no longer in force at the corpus snapshot date.
    #[serde(default)]
    pub repealed: bool,
    pub score: f64,
    pub fused_score: f64,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedContext {
    pub entries: Vec<ContextEntry>,
    /// Total chars of entry texts.
    pub chars_used: usize,
}

impl RankedContext {
    fn from_entries(entries: Vec<ContextEntry>) -> Self {
        let chars_used = entries.iter().map(|e| text::char_len(&e.text)).sum();
        RankedContext { entries, chars_used }
    }

    pub fn chunk_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.chunk_id.clone()).collect()
    }
}

fn entry(bundle: &IndexBundle, c: &RetrievalCandidate, score: f64) -> Result<ContextEntry, RetrievalError> {
    let chunk = bundle.chunk(&c.chunk_id).ok_or_else(|| RetrievalError::UnknownChunk(c.chunk_id.clone()))?;
    let doc = bundle.doc(&chunk.doc_id);
    Ok(ContextEntry {
        chunk_id: chunk.chunk_id.clone(),
        doc_id: chunk.doc_id.clone(),
        source: doc.map(|d| d.label()).unwrap_or_else(|| chunk.doc_id.clone()),
        repealed: doc.is_some_and(|d| d.repealed_at(bundle.snapshot_date())),
        score,
        fused_score: c.fused_score,
        text: chunk.text.clone(),
    })
}

/// The first `m` fused candidates as a context, scored by fused score.
pub fn top_fused(fused: &[RetrievalCandidate], bundle: &IndexBundle, m: usize) -> Result<RankedContext, RetrievalError> {
    let entries = fused.iter().take(m).map(|c| entry(bundle, c, c.fused_score)).collect::<Result<_, _>>()?;
    Ok(RankedContext::from_entries(entries))
}

/// Scores the first `take_n` fused candidates and keeps the best `take_m`
/// (ties by fused score, then chunk id).
pub fn rerank(
    query: &str,
    fused: &[RetrievalCandidate],
    bundle: &IndexBundle,
    scorer: &dyn RerankScorer,
    take_n: usize,
    take_m: usize,
) -> Result<RankedContext, RetrievalError> {
    if take_m > take_n {
        return Err(RetrievalError::Params(format!("take_m {take_m} exceeds take_n {take_n}")));
    }
    let mut scored = Vec::new();
    for c in fused.iter().take(take_n) {
        let chunk = bundle.chunk(&c.chunk_id).ok_or_else(|| RetrievalError::UnknownChunk(c.chunk_id.clone()))?;
        let s = scorer
            .score(query, &chunk.text)
            .map_err(|e| RetrievalError::Scorer { chunk_id: c.chunk_id.clone(), message: e.0 })?;
        scored.push((s, c));
    }
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| b.1.fused_score.total_cmp(&a.1.fused_score))
            .then_with(|| a.1.chunk_id.cmp(&b.1.chunk_id))
    });
    let entries = scored.into_iter().take(take_m).map(|(s, c)| entry(bundle, c, s)).collect::<Result<_, _>>()?;
    Ok(RankedContext::from_entries(entries))
}

/// Drops the least query-relevant sentences until the context fits in
/// `char_budget` chars. A chunk loses its last sentence only once no
/// other chunk has more than one. Kept sentences keep their order and are
/// joined by single spaces; emptied chunks are removed.
pub fn compress_context(
    query: &str,
    context: &RankedContext,
    scorer: &dyn RerankScorer,
    char_budget: usize,
) -> Result<RankedContext, RetrievalError> {
    if char_budget == 0 {
        return Err(RetrievalError::Params("budget must be positive".into()));
    }
    if context.chars_used <= char_budget {
        return Ok(context.clone());
    }
    struct Sent {
        text: String,
        score: f64,
        kept: bool,
    }
    let mut per_entry: Vec<Vec<Sent>> = Vec::with_capacity(context.entries.len());
    for e in &context.entries {
        let mut v = Vec::new();
        for s in text::sentences(&e.text) {
            let score = scorer
                .score(query, s)
                .map_err(|err| RetrievalError::Scorer { chunk_id: e.chunk_id.clone(), message: err.0 })?;
            v.push(Sent { text: s.to_string(), score, kept: true });
        }
        per_entry.push(v);
    }
    let shortest = per_entry.iter().flatten().map(|s| text::char_len(&s.text)).min().unwrap_or(0);
    if char_budget < shortest {
        return Err(RetrievalError::BudgetInfeasible { budget: char_budget, shortest });
    }
    let entry_len = |v: &[Sent]| {
        let kept: Vec<usize> = v.iter().filter(|s| s.kept).map(|s| text::char_len(&s.text)).collect();
        if kept.is_empty() {
            0
        } else {
            kept.iter().sum::<usize>() + kept.len() - 1
        }
    };
    // ascending relevance, then position
    let mut order: Vec<(usize, usize)> =
        per_entry.iter().enumerate().flat_map(|(i, v)| (0..v.len()).map(move |j| (i, j))).collect();
    order.sort_by(|a, b| per_entry[a.0][a.1].score.total_cmp(&per_entry[b.0][b.1].score).then(a.cmp(b)));

    let mut total: usize = per_entry.iter().map(|v| entry_len(v)).sum();
    while total > char_budget {
        let kept_count: Vec<usize> = per_entry.iter().map(|v| v.iter().filter(|s| s.kept).count()).collect();
        let any_multi = kept_count.iter().any(|&n| n > 1);
        let Some(&(i, j)) =
            order.iter().find(|&&(i, j)| per_entry[i][j].kept && (kept_count[i] > 1 || !any_multi))
        else {
            break;
        };
        per_entry[i][j].kept = false;
        total = per_entry.iter().map(|v| entry_len(v)).sum();
    }
    let entries = context
        .entries
        .iter()
        .zip(&per_entry)
        .filter_map(|(e, v)| {
            let kept: Vec<&str> = v.iter().filter(|s| s.kept).map(|s| s.text.as_str()).collect();
            (!kept.is_empty()).then(|| ContextEntry { text: kept.join(" "), ..e.clone() })
        })
        .collect();
    Ok(RankedContext::from_entries(entries))
}

/// Parameters of the full retrieval pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    #[serde(default)]
    pub hybrid: HybridParams,
    #[serde(default = "default_k_rrf")]
    pub k_rrf: f64,
    #[serde(default = "default_rerank_n")]
    pub rerank_n: usize,
    #[serde(default = "default_rerank_m")]
    pub rerank_m: usize,
    #[serde(default = "default_canonical_top")]
    pub canonical_top: usize,
    #[serde(default = "default_char_budget")]
    pub char_budget: usize,
}

fn default_k_rrf() -> f64 {
    DEFAULT_K_RRF
}
fn default_rerank_n() -> usize {
    20
}
fn default_rerank_m() -> usize {
    5
}
fn default_canonical_top() -> usize {
    5
}
fn default_char_budget() -> usize {
    3000
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            hybrid: HybridParams::default(),
            k_rrf: DEFAULT_K_RRF,
            rerank_n: 20,
            rerank_m: 5,
            canonical_top: 5,
            char_budget: 3000,
        }
    }
}

/// Chunk ids in a context, for referential checks.
pub fn context_chunk_set(ctx: &RankedContext) -> BTreeSet<&str> {
    ctx.entries.iter().map(|e| e.chunk_id.as_str()).collect()
}
