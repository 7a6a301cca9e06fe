//! Citation and fact verification, fidelity scoring and the
//! self-correction loop.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, CompletionBackend};
use crate::citation::{self, citation_occurrences, CitationKey, CitationKind};
use crate::corpus::{IndexBundle, SourceDocument};
use crate::dataset::Task;
use crate::generation::{Condition, GenerationRecord};
use crate::prompt;
use crate::retrieval::RerankScorer;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CitationStatus {
    Valid,
    Nonexistent,
    MisattributedCourt,
    MisattributedNumber,
    MisattributedDate,
    Misgrounded,
    TemporalRepealed,
}

impl CitationStatus {
    pub const ALL: [CitationStatus; 7] = [
        CitationStatus::Valid,
        CitationStatus::Nonexistent,
        CitationStatus::MisattributedCourt,
        CitationStatus::MisattributedNumber,
        CitationStatus::MisattributedDate,
        CitationStatus::Misgrounded,
        CitationStatus::TemporalRepealed,
    ];

    pub fn is_false(self) -> bool {
        self != CitationStatus::Valid
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CitationStatus::Valid => "valid",
            CitationStatus::Nonexistent => "nonexistent",
            CitationStatus::MisattributedCourt => "misattributed-court",
            CitationStatus::MisattributedNumber => "misattributed-number",
            CitationStatus::MisattributedDate => "misattributed-date",
            CitationStatus::Misgrounded => "misgrounded",
            CitationStatus::TemporalRepealed => "temporal-repealed",
        }
    }

    /// Typical severity and detectability of each error type.
    pub fn taxonomy(self) -> Option<(Severity, Detectability)> {
        use CitationStatus::*;
        match self {
            Valid => None,
            Nonexistent => Some((Severity::Critical, Detectability::Easy)),
            MisattributedCourt | MisattributedNumber | MisattributedDate => {
                Some((Severity::Critical, Detectability::Medium))
            }
            Misgrounded => Some((Severity::Moderate, Detectability::Difficult)),
            TemporalRepealed => Some((Severity::Critical, Detectability::Medium)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    Minor,
    Moderate,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Detectability {
    Easy,
    Medium,
    Difficult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Generative,
    Consultative,
}

impl From<Condition> for Origin {
    fn from(c: Condition) -> Self {
        match c {
            Condition::Direct => Origin::Generative,
            _ => Origin::Consultative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationVerdict {
    #[serde(with = "citation::as_string")]
    pub key: CitationKey,
    /// Text as written in the output.
    pub raw: String,
    /// Byte span of the first occurrence.
    pub span: (usize, usize),
    pub status: CitationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<Severity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectability: Option<Detectability>,
    pub origin: Origin,
    /// Registry document the citation was matched against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_doc: Option<String>,
    /// Claim-to-source relevance, when it was assessed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyParams {
    pub misgrounding_threshold: f64,
    pub support_threshold: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams { misgrounding_threshold: 0.2, support_threshold: 0.6 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("empty registry")]
    EmptyRegistry,
    #[error("scorer failed on {doc_id}: {message}")]
    Scorer { doc_id: String, message: String },
}

static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[S(\d+)\]").unwrap());

/// Claim text with citations and source tags removed.
pub fn strip_references(claim: &str) -> String {
    let mut out = String::with_capacity(claim.len());
    let mut last = 0;
    for k in citation_occurrences(claim) {
        out.push_str(&claim[last..k.span.0]);
        last = k.span.1;
    }
    out.push_str(&claim[last..]);
    TAG.replace_all(&out, " ").into_owned()
}

fn keyed_docs(bundle: &IndexBundle) -> impl Iterator<Item = (&SourceDocument, &CitationKey)> {
    bundle.docs.values().filter_map(|d| d.citation_key.as_ref().map(|k| (d, k)))
}

fn exact_match<'a>(bundle: &'a IndexBundle, key: &CitationKey) -> Option<&'a SourceDocument> {
    let whole = key.subdivision.as_ref().map(|_| CitationKey { subdivision: None, ..key.clone() });
    keyed_docs(bundle)
        .find(|(_, k)| k.same_reference(key))
        .or_else(|| whole.as_ref().and_then(|w| keyed_docs(bundle).find(|(_, k)| k.same_reference(w))))
        .map(|(d, _)| d)
}

fn doc_date(d: &SourceDocument) -> Option<chrono::NaiveDate> {
    d.metadata.date.or_else(|| d.citation_key.as_ref().and_then(|k| k.date))
}

/// Checks one citation against the registry. The cascade: a source with
/// the same number and year under another body is a court misattribution;
/// a source of the same body and date under another number is a number
/// misattribution; no candidate at all is a fabrication. A matched source
/// can still carry the wrong date, be irrelevant to the claim it backs, or
/// have been repealed by the snapshot date.
pub fn verify_citation(
    key: &CitationKey,
    bundle: &IndexBundle,
    claim_context: &str,
    scorer: &dyn RerankScorer,
    params: &VerifyParams,
    origin: Origin,
) -> Result<CitationVerdict, VerifyError> {
    if bundle.docs.is_empty() {
        return Err(VerifyError::EmptyRegistry);
    }
    let verdict = |status: CitationStatus, doc: Option<&SourceDocument>, relevance: Option<f64>| {
        let tax = status.taxonomy();
        CitationVerdict {
            key: key.clone(),
            raw: key.raw.clone(),
            span: key.span,
            status,
            severity: tax.map(|t| t.0),
            detectability: tax.map(|t| t.1),
            origin,
            matched_doc: doc.map(|d| d.doc_id.clone()),
            relevance,
        }
    };

    let Some(doc) = exact_match(bundle, key) else {
        let statute = key.kind == CitationKind::StatuteArticle;
        let other_body = keyed_docs(bundle).find(|(_, k)| {
            if statute {
                k.kind == CitationKind::StatuteArticle && k.number == key.number
            } else {
                k.kind != CitationKind::StatuteArticle && k.number == key.number && k.year == key.year
            }
        });
        if let Some((d, _)) = other_body {
            return Ok(verdict(CitationStatus::MisattributedCourt, Some(d), None));
        }
        if let Some(date) = key.date {
            let same_day = keyed_docs(bundle).find(|(d, k)| k.court.same_body(&key.court) && doc_date(d) == Some(date));
            if let Some((d, _)) = same_day {
                return Ok(verdict(CitationStatus::MisattributedNumber, Some(d), None));
            }
        }
        return Ok(verdict(CitationStatus::Nonexistent, None, None));
    };

    if let (Some(cited), Some(actual)) = (key.date, doc_date(doc)) {
        if cited != actual {
            return Ok(verdict(CitationStatus::MisattributedDate, Some(doc), None));
        }
    }
    let claim = strip_references(claim_context);
    let relevance = if text::content_terms(&claim).is_empty() {
        None
    } else {
        Some(scorer.score(&claim, &doc.text).map_err(|e| VerifyError::Scorer { doc_id: doc.doc_id.clone(), message: e.0 })?)
    };
    if relevance.is_some_and(|r| r < params.misgrounding_threshold) {
        return Ok(verdict(CitationStatus::Misgrounded, Some(doc), relevance));
    }
    if doc.repealed_at(bundle.snapshot_date()) {
        return Ok(verdict(CitationStatus::TemporalRepealed, Some(doc), relevance));
    }
    Ok(verdict(CitationStatus::Valid, Some(doc), relevance))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClaimKind {
    Factual,
    LegalGround,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub claim_id: String,
    pub text: String,
    /// Byte span in the output.
    pub span: (usize, usize),
    pub kind: ClaimKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub supporting_chunks: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub citations: Vec<String>,
}

fn is_heading(s: &str) -> bool {
    s.starts_with('#') || !s.ends_with(['.', '!', '…', '"', '»', ')'])
}

/// One claim per declarative sentence. Questions and unterminated lines
/// without references (headings) are skipped. `tags` maps source tags
/// such as `S1` to chunk ids.
pub fn extract_claims(output: &str, tags: &BTreeMap<String, String>) -> Vec<Claim> {
    let mut claims = Vec::new();
    for span in text::sentence_spans(output) {
        let s = &output[span.clone()];
        let cites: Vec<String> = citation::parse_citations(s).iter().map(|k| k.normalized()).collect();
        let found_tags: Vec<String> = TAG.captures_iter(s).map(|c| format!("S{}", &c[1])).collect();
        let referenced = !cites.is_empty() || !found_tags.is_empty();
        if s.ends_with('?') || (!referenced && is_heading(s)) || !s.chars().any(char::is_alphabetic) {
            continue;
        }
        let mut source_tags = found_tags;
        source_tags.dedup();
        let supporting_chunks = source_tags.iter().filter_map(|t| tags.get(t).cloned()).collect();
        claims.push(Claim {
            claim_id: format!("c{:03}", claims.len() + 1),
            text: s.to_string(),
            span: (span.start, span.end),
            kind: if referenced { ClaimKind::LegalGround } else { ClaimKind::Factual },
            source_tags,
            supporting_chunks,
            citations: cites,
        });
    }
    claims
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactStatus {
    Supported,
    FabricatedInvention,
    FabricatedExaggeration,
    FabricatedInference,
}

impl FactStatus {
    pub const ALL: [FactStatus; 4] = [
        FactStatus::Supported,
        FactStatus::FabricatedInvention,
        FactStatus::FabricatedExaggeration,
        FactStatus::FabricatedInference,
    ];

    pub fn is_fabricated(self) -> bool {
        self != FactStatus::Supported
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FactStatus::Supported => "supported",
            FactStatus::FabricatedInvention => "fabricated-invention",
            FactStatus::FabricatedExaggeration => "fabricated-exaggeration",
            FactStatus::FabricatedInference => "fabricated-inference",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "source", content = "id", rename_all = "kebab-case")]
pub enum EvidenceRef {
    Brief,
    Annex(String),
    GoldFact(String),
    Chunk(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactVerdict {
    pub claim_id: String,
    pub text: String,
    pub span: (usize, usize),
    pub status: FactStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<EvidenceRef>,
    pub support: f64,
}

/// Best-supporting source sentence for a claim.
fn best_evidence<'a>(
    claim: &str,
    task: &'a Task,
    chunks: &'a [(String, String)],
    scorer: &dyn RerankScorer,
) -> Option<(EvidenceRef, &'a str, f64)> {
    let mut sources: Vec<(EvidenceRef, &str)> = vec![(EvidenceRef::Brief, task.inputs.brief.as_str())];
    sources.extend(task.inputs.annexes.iter().map(|a| (EvidenceRef::Annex(a.id.clone()), a.text.as_str())));
    sources.extend(task.gold_standard.facts.iter().map(|f| (EvidenceRef::GoldFact(f.id.clone()), f.statement.as_str())));
    sources.extend(chunks.iter().map(|(id, t)| (EvidenceRef::Chunk(id.clone()), t.as_str())));
    let mut best: Option<(EvidenceRef, &str, f64)> = None;
    for (r, body) in sources {
        for s in text::sentences(body) {
            let score = scorer.score(claim, s).unwrap_or(0.0);
            if best.as_ref().is_none_or(|b| score > b.2) {
                best = Some((r.clone(), s, score));
            }
        }
    }
    best
}

/// Judges a factual claim against the task materials and the retrieved
/// chunks. A claim with enough lexical support is still fabricated when
/// it inflates a number of its evidence (exaggeration), asserts what the
/// evidence only hedges (inference) or flips its polarity (invention).
pub fn check_fact_support(
    claim: &Claim,
    task: &Task,
    chunks: &[(String, String)],
    scorer: &dyn RerankScorer,
    params: &VerifyParams,
) -> FactVerdict {
    let clean = strip_references(&claim.text);
    let mk = |status, evidence, support| FactVerdict {
        claim_id: claim.claim_id.clone(),
        text: claim.text.clone(),
        span: claim.span,
        status,
        evidence,
        support,
    };
    let Some((evidence, sentence, support)) = best_evidence(&clean, task, chunks, scorer) else {
        return mk(FactStatus::FabricatedInvention, None, 0.0);
    };
    if support < params.support_threshold {
        return mk(FactStatus::FabricatedInvention, None, support);
    }
    let claim_nums = text::numbers(&clean);
    let source_nums = text::numbers(sentence);
    let unmatched: Vec<f64> = claim_nums.iter().copied().filter(|x| !source_nums.contains(x)).collect();
    if let Some(x) = unmatched.first() {
        let status = if source_nums.iter().any(|s| x > s) {
            FactStatus::FabricatedExaggeration
        } else {
            FactStatus::FabricatedInvention
        };
        return mk(status, None, support);
    }
    if text::is_negated(&clean) != text::is_negated(sentence) {
        return mk(FactStatus::FabricatedInvention, None, support);
    }
    if text::is_hedged(sentence) && !text::is_hedged(&clean) {
        return mk(FactStatus::FabricatedInference, None, support);
    }
    mk(FactStatus::Supported, Some(evidence), support)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub record_id: String,
    pub citation_verdicts: Vec<CitationVerdict>,
    pub fact_verdicts: Vec<FactVerdict>,
    pub fidelity: f64,
}

impl FidelityReport {
    pub fn n_items(&self) -> usize {
        self.citation_verdicts.len() + self.fact_verdicts.len()
    }

    pub fn n_false_citations(&self) -> usize {
        self.citation_verdicts.iter().filter(|v| v.status.is_false()).count()
    }

    pub fn n_fabricated_facts(&self) -> usize {
        self.fact_verdicts.iter().filter(|v| v.status.is_fabricated()).count()
    }

    pub fn is_clean(&self) -> bool {
        self.n_false_citations() == 0 && self.n_fabricated_facts() == 0
    }

    pub fn counts(&self) -> ItemCounts {
        ItemCounts {
            citations: self.citation_verdicts.len(),
            false_citations: self.n_false_citations(),
            facts: self.fact_verdicts.len(),
            fabricated_facts: self.n_fabricated_facts(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCounts {
    pub citations: usize,
    pub false_citations: usize,
    pub facts: usize,
    pub fabricated_facts: usize,
}

/// Valid citations plus supported facts over all items; 1.0 when there
/// are no items.
pub fn fidelity(citations: &[CitationVerdict], facts: &[FactVerdict]) -> f64 {
    let total = citations.len() + facts.len();
    if total == 0 {
        return 1.0;
    }
    let good = citations.iter().filter(|v| !v.status.is_false()).count()
        + facts.iter().filter(|v| !v.status.is_fabricated()).count();
    good as f64 / total as f64
}

/// Everything verification needs to know about one output.
pub struct VerifyContext<'a> {
    pub task: &'a Task,
    pub bundle: &'a IndexBundle,
    /// Ids of the chunks placed in the prompt, in tag order (`S1` first).
    pub context_chunk_ids: &'a [String],
    pub scorer: &'a dyn RerankScorer,
    pub params: VerifyParams,
    pub origin: Origin,
}

impl VerifyContext<'_> {
    fn tags(&self) -> BTreeMap<String, String> {
        self.context_chunk_ids.iter().enumerate().map(|(i, c)| (format!("S{}", i + 1), c.clone())).collect()
    }

    fn chunks(&self) -> Vec<(String, String)> {
        self.context_chunk_ids
            .iter()
            .filter_map(|id| self.bundle.chunk(id).map(|c| (id.clone(), c.text.clone())))
            .collect()
    }
}

/// Verifies every unique citation (judged in the sentence of its first
/// occurrence) and every claim that carries no citation.
pub fn verify_output(record_id: &str, output: &str, cx: &VerifyContext) -> Result<FidelityReport, VerifyError> {
    let spans = text::sentence_spans(output);
    let sentence_of = |pos: usize| {
        spans.iter().find(|r| r.start <= pos && pos < r.end).map(|r| &output[r.clone()]).unwrap_or(output)
    };
    let mut citation_verdicts = Vec::new();
    for key in citation::parse_citations(output) {
        citation_verdicts.push(verify_citation(&key, cx.bundle, sentence_of(key.span.0), cx.scorer, &cx.params, cx.origin)?);
    }
    let chunks = cx.chunks();
    let fact_verdicts: Vec<FactVerdict> = extract_claims(output, &cx.tags())
        .iter()
        .filter(|c| c.citations.is_empty())
        .map(|c| check_fact_support(c, cx.task, &chunks, cx.scorer, &cx.params))
        .collect();
    let fidelity = fidelity(&citation_verdicts, &fact_verdicts);
    Ok(FidelityReport { record_id: record_id.to_string(), citation_verdicts, fact_verdicts, fidelity })
}

/// Verifies a stored generation record against its task and the bundle.
pub fn verify_record(
    record: &GenerationRecord,
    task: &Task,
    bundle: &IndexBundle,
    scorer: &dyn RerankScorer,
    params: VerifyParams,
) -> Result<FidelityReport, VerifyError> {
    let cx = VerifyContext {
        task,
        bundle,
        context_chunk_ids: &record.context_chunk_ids,
        scorer,
        params,
        origin: record.cell.condition.into(),
    };
    verify_output(&record.record_id, &record.output, &cx)
}

/// Removes the byte spans `bad` (sorted, disjoint) and tidies the
/// whitespace left behind, keeping paragraph breaks.
pub fn remove_spans(output: &str, bad: &[(usize, usize)]) -> String {
    let mut out = String::with_capacity(output.len());
    let mut last = 0;
    for &(s, e) in bad {
        out.push_str(&output[last..s]);
        last = e;
    }
    out.push_str(&output[last..]);
    let paragraphs: Vec<String> = out
        .split("\n\n")
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|p| !p.is_empty())
        .collect();
    let mut joined = paragraphs.join("\n\n");
    if output.ends_with('\n') && !joined.is_empty() {
        joined.push('\n');
    }
    joined
}

/// Spans of the sentences containing any of the byte positions.
pub fn sentences_at(output: &str, positions: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let spans = text::sentence_spans(output);
    let mut bad: Vec<(usize, usize)> = Vec::new();
    for pos in positions {
        if let Some(r) = spans.iter().find(|r| r.start <= pos && pos < r.end) {
            if !bad.contains(&(r.start, r.end)) {
                bad.push((r.start, r.end));
            }
        }
    }
    bad.sort();
    bad
}

/// Removes every sentence holding a failing citation or fabricated fact.
pub fn strip_failing(output: &str, report: &FidelityReport) -> (String, usize) {
    let failing = report
        .citation_verdicts
        .iter()
        .filter(|v| v.status.is_false())
        .map(|v| v.span.0)
        .chain(report.fact_verdicts.iter().filter(|v| v.status.is_fabricated()).map(|v| v.span.0));
    let bad = sentences_at(output, failing);
    (remove_spans(output, &bad), bad.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopParams {
    pub threshold: f64,
    pub max_cycles: u32,
}

impl Default for LoopParams {
    fn default() -> Self {
        LoopParams { threshold: 0.98, max_cycles: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopSummary {
    /// Fidelity of the best output so far, after the first pass and after
    /// each correction cycle.
    pub fidelity_trace: Vec<f64>,
    /// Counts before any sentence was stripped.
    pub pre_strip: ItemCounts,
    pub stripped_sentences: usize,
    pub final_fidelity: f64,
}

#[derive(Debug)]
pub struct CorrectionOutcome {
    pub record: GenerationRecord,
    pub report: FidelityReport,
    pub summary: LoopSummary,
}

#[derive(Debug, thiserror::Error)]
#[error("correction loop aborted after {cycles} cycles: {error}")]
pub struct CorrectionFailure {
    pub cycles: u32,
    pub error: LoopError,
    /// State reached before the failure.
    pub partial: Box<CorrectionOutcome>,
}

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Verifies the record and, while fidelity is under the threshold, asks
/// the backend for a corrected draft listing the failing items, up to
/// `max_cycles` times. The best draft is kept at every step. If it is
/// still under the threshold, failing sentences are stripped until the
/// text verifies clean.
pub fn fidelity_and_correct(
    record: &GenerationRecord,
    backend: &dyn CompletionBackend,
    cx: &VerifyContext,
    params: &LoopParams,
) -> Result<CorrectionOutcome, Box<CorrectionFailure>> {
    let first = match verify_output(&record.record_id, &record.output, cx) {
        Ok(r) => r,
        Err(e) => {
            let partial = CorrectionOutcome { record: record.clone(), report: FidelityReport::default(), summary: LoopSummary::default() };
            return Err(Box::new(CorrectionFailure { cycles: 0, error: e.into(), partial: Box::new(partial) }));
        }
    };
    let mut best_output = record.output.clone();
    let mut best = first;
    let mut summary = LoopSummary { fidelity_trace: vec![best.fidelity], ..Default::default() };
    let mut rec = record.clone();
    let mut cycles = 0;
    let fail = |rec: GenerationRecord, report: FidelityReport, summary: LoopSummary, cycles: u32, error: LoopError| {
        Box::new(CorrectionFailure { cycles, error, partial: Box::new(CorrectionOutcome { record: rec, report, summary }) })
    };
    while best.fidelity < params.threshold && cycles < params.max_cycles {
        cycles += 1;
        let p = prompt::correction_prompt(&record.prompt, &best_output, &best);
        rec.timing.backend_calls += 1;
        let out = match backend.generate(&p, record.cell.temperature, record.cell.seed.wrapping_add(cycles as u64)) {
            Ok(o) => o,
            Err(e) => {
                rec.correction_cycles = cycles;
                return Err(fail(rec, best, summary, cycles, e.into()));
            }
        };
        let report = match verify_output(&record.record_id, &out, cx) {
            Ok(r) => r,
            Err(e) => {
                rec.correction_cycles = cycles;
                return Err(fail(rec, best, summary, cycles, e.into()));
            }
        };
        if report.fidelity > best.fidelity {
            best = report;
            best_output = out;
        }
        summary.fidelity_trace.push(best.fidelity);
    }
    summary.pre_strip = best.counts();
    while best.fidelity < params.threshold && !best.is_clean() {
        let (stripped, n) = strip_failing(&best_output, &best);
        if n == 0 {
            break;
        }
        summary.stripped_sentences += n;
        best_output = stripped;
        best = match verify_output(&record.record_id, &best_output, cx) {
            Ok(r) => r,
            Err(e) => return Err(fail(rec, best, summary, cycles, e.into())),
        };
    }
    summary.final_fidelity = best.fidelity;
    rec.output = best_output;
    rec.correction_cycles = cycles;
    rec.correction = Some(summary.clone());
    Ok(CorrectionOutcome { record: rec, report: best, summary })
}
