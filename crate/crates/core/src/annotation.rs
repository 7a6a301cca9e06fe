//! Blinded annotation batches, human label records and their conversion
//! into scoring labels.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::citation::CitationKey;
use crate::dataset::{Task, TaskSuite};
use crate::generation::GenerationRecord;
use crate::metrics::{CitationLabel, FactLabel, LabelSource, ResponseLabels};
use crate::verification::{CitationStatus, Detectability, FactStatus, FidelityReport, Severity};

pub const BATCH_SCHEMA_VERSION: u32 = 1;
/// Replaces any identifying string found in exported text.
pub const REDACTED: &str = "[omitido]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocatedSpan {
    pub span_id: String,
    /// Byte offsets into the response.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnexMaterial {
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMaterials {
    pub scenario: String,
    pub brief: String,
    #[serde(default)]
    pub annexes: Vec<AnnexMaterial>,
}

impl From<&Task> for TaskMaterials {
    fn from(t: &Task) -> Self {
        TaskMaterials {
            scenario: t.scenario.clone(),
            brief: t.inputs.brief.clone(),
            annexes: t.inputs.annexes.iter().map(|a| AnnexMaterial { title: a.title.clone(), text: a.text.clone() }).collect(),
        }
    }
}

/// One response as annotators see it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedItem {
    pub item_id: String,
    pub materials: TaskMaterials,
    pub response: String,
    pub citation_spans: Vec<LocatedSpan>,
    pub fact_spans: Vec<LocatedSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAssignment {
    pub item_id: String,
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedBatch {
    pub schema_version: u32,
    pub batch_id: String,
    pub items: Vec<BlindedItem>,
    #[serde(default)]
    pub assignments: Vec<SlotAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindingEntry {
    pub item_id: String,
    pub record_id: String,
    pub cell_id: String,
    pub task_id: String,
    pub backend_id: String,
    pub condition: String,
    pub temperature: f64,
    pub template: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindingMap {
    pub schema_version: u32,
    pub batch_id: String,
    pub entries: Vec<BlindingEntry>,
}

impl BlindingMap {
    /// Identifying strings that must never reach annotators. Temperatures
    /// and seeds are numbers that occur naturally in legal text, so they
    /// are kept in the map but are not part of this list.
    pub fn secrets(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .flat_map(|e| [&e.record_id, &e.cell_id, &e.backend_id, &e.condition, &e.template])
            .filter(|s| !s.is_empty())
            .cloned()
            .collect()
    }

    pub fn by_item(&self) -> BTreeMap<&str, &BlindingEntry> {
        self.entries.iter().map(|e| (e.item_id.as_str(), e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExportError {
    #[error("need at least 2 annotators, got {0}")]
    TooFewAnnotators(usize),
    #[error("duplicate annotator id {0:?}")]
    DuplicateAnnotator(String),
    #[error("no records to export")]
    NoRecords,
    #[error("record {0} has no fidelity report")]
    MissingReport(String),
    #[error("record {record}: unknown task {task}")]
    UnknownTask { record: String, task: String },
}

/// Removes every secret from `text`, longest secrets first so that one
/// secret containing another is removed whole.
pub fn scrub(text: &str, secrets: &[String]) -> String {
    let mut out = text.to_string();
    for s in secrets {
        if out.contains(s.as_str()) {
            out = out.replace(s.as_str(), REDACTED);
        }
    }
    out
}

fn sorted_secrets(set: &BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = set.iter().cloned().collect();
    v.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    v
}

fn locate(response: &str, texts: impl Iterator<Item = String>, prefix: char) -> Vec<LocatedSpan> {
    let mut out = Vec::new();
    let mut taken = BTreeSet::new();
    for text in texts {
        let Some(start) = response.find(&text) else { continue };
        if !taken.insert(start) {
            continue;
        }
        out.push(LocatedSpan { span_id: String::new(), start, end: start + text.len(), text });
    }
    out.sort_by_key(|s| s.start);
    for (i, s) in out.iter_mut().enumerate() {
        s.span_id = format!("{prefix}{}", i + 1);
    }
    out
}

/// Two slots per item, dealt round-robin over the annotators so that no
/// annotator holds both slots of an item and loads differ by at most one.
pub fn assign_slots(item_ids: &[String], annotators: &[String]) -> Result<Vec<SlotAssignment>, ExportError> {
    if annotators.len() < 2 {
        return Err(ExportError::TooFewAnnotators(annotators.len()));
    }
    let mut seen = BTreeSet::new();
    if let Some(d) = annotators.iter().find(|a| !seen.insert(a.as_str())) {
        return Err(ExportError::DuplicateAnnotator(d.clone()));
    }
    let m = annotators.len();
    Ok(item_ids
        .iter()
        .enumerate()
        .flat_map(|(i, id)| {
            [2 * i % m, (2 * i + 1) % m].map(|a| SlotAssignment { item_id: id.clone(), annotator: annotators[a].clone() })
        })
        .collect())
}

/// Builds a blinded batch and its blinding map. Items are shuffled with
/// `seed`; spans are pre-located from the machine report.
pub fn export_batch(
    records: &[GenerationRecord],
    reports: &BTreeMap<String, FidelityReport>,
    suite: &TaskSuite,
    annotators: &[String],
    seed: u64,
) -> Result<(BlindedBatch, BlindingMap), ExportError> {
    if annotators.len() < 2 {
        return Err(ExportError::TooFewAnnotators(annotators.len()));
    }
    if records.is_empty() {
        return Err(ExportError::NoRecords);
    }
    let mut order: Vec<&GenerationRecord> = records.iter().collect();
    order.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut h = Sha256::new();
    h.update(format!("archivist-batch/v1|{seed}"));
    for r in &order {
        h.update(b"|");
        h.update(r.record_id.as_bytes());
    }
    let batch_id = format!("batch-{}", hex::encode(&h.finalize()[..6]));

    let mut entries = Vec::new();
    for (i, r) in order.iter().enumerate() {
        entries.push(BlindingEntry {
            item_id: format!("item-{:04}", i + 1),
            record_id: r.record_id.clone(),
            cell_id: r.cell.cell_id(),
            task_id: r.cell.task_id.clone(),
            backend_id: r.cell.backend_id.clone(),
            condition: r.cell.condition.to_string(),
            temperature: r.cell.temperature,
            template: r.cell.template.to_string(),
            seed: r.cell.seed,
        });
    }
    let map = BlindingMap { schema_version: BATCH_SCHEMA_VERSION, batch_id: batch_id.clone(), entries };
    let secrets = sorted_secrets(&map.secrets());

    let mut items = Vec::new();
    for (r, e) in order.iter().zip(&map.entries) {
        let report = reports.get(&r.record_id).ok_or_else(|| ExportError::MissingReport(r.record_id.clone()))?;
        let task = suite
            .get(&r.cell.task_id)
            .ok_or_else(|| ExportError::UnknownTask { record: r.record_id.clone(), task: r.cell.task_id.clone() })?;
        let response = scrub(&r.output, &secrets);
        let m = TaskMaterials::from(task);
        let materials = TaskMaterials {
            scenario: scrub(&m.scenario, &secrets),
            brief: scrub(&m.brief, &secrets),
            annexes: m.annexes.into_iter().map(|a| AnnexMaterial { title: scrub(&a.title, &secrets), text: scrub(&a.text, &secrets) }).collect(),
        };
        let citation_spans = locate(&response, report.citation_verdicts.iter().map(|v| v.raw.clone()), 'c');
        let fact_spans = locate(&response, report.fact_verdicts.iter().map(|v| v.text.clone()), 'f');
        items.push(BlindedItem { item_id: e.item_id.clone(), materials, response, citation_spans, fact_spans });
    }
    let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    let assignments = assign_slots(&ids, annotators)?;
    Ok((BlindedBatch { schema_version: BATCH_SCHEMA_VERSION, batch_id, items, assignments }, map))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationSpanLabel {
    pub span_id: String,
    /// Required for spans the annotator added; filled from the located
    /// span otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub status: CitationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<Severity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectability: Option<Detectability>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactSpanLabel {
    pub span_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub status: FactStatus,
}

/// One annotator's labels for one blinded item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub response_id: String,
    #[serde(default)]
    pub annotator_id: String,
    #[serde(default)]
    pub citation_labels: Vec<CitationSpanLabel>,
    #[serde(default)]
    pub fact_labels: Vec<FactSpanLabel>,
    /// Usefulness of each listed argument, 1 to 5.
    #[serde(default)]
    pub likert: Vec<u8>,
    #[serde(default)]
    pub review_minutes: Option<f64>,
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field(field: impl Into<String>, message: impl Into<String>) -> FieldError {
    FieldError { field: field.into(), message: message.into() }
}

impl AnnotationRecord {
    /// Checks Likert bounds, review time and span coverage against the
    /// item: every located span gets exactly one label and added spans
    /// carry their text. On success the label texts are filled in.
    pub fn validate(&mut self, item: &BlindedItem) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.response_id != item.item_id {
            errs.push(field("response_id", format!("expected {}", item.item_id)));
        }
        for (i, v) in self.likert.iter().enumerate() {
            if !(1..=5).contains(v) {
                errs.push(field(format!("likert[{i}]"), format!("{v} is outside 1..=5")));
            }
        }
        if let Some(m) = self.review_minutes {
            if !m.is_finite() || m < 0.0 {
                errs.push(field("review_minutes", "must be a non-negative number"));
            }
        }
        check_spans(
            "citation_labels",
            &item.citation_spans,
            self.citation_labels.iter_mut().map(|l| (&l.span_id, &mut l.text)),
            &mut errs,
        );
        check_spans("fact_labels", &item.fact_spans, self.fact_labels.iter_mut().map(|l| (&l.span_id, &mut l.text)), &mut errs);
        if errs.is_empty() { Ok(()) } else { Err(errs) }
    }
}

fn check_spans<'a>(
    name: &str,
    spans: &[LocatedSpan],
    labels: impl Iterator<Item = (&'a String, &'a mut Option<String>)>,
    errs: &mut Vec<FieldError>,
) {
    let by_id: BTreeMap<&str, &LocatedSpan> = spans.iter().map(|s| (s.span_id.as_str(), s)).collect();
    let mut seen = BTreeSet::new();
    for (i, (id, text)) in labels.enumerate() {
        if !seen.insert(id.clone()) {
            errs.push(field(format!("{name}[{i}].span_id"), format!("span {id} labelled twice")));
            continue;
        }
        match by_id.get(id.as_str()) {
            Some(s) => *text = Some(s.text.clone()),
            None if text.as_deref().is_some_and(|t| !t.trim().is_empty()) => {}
            None => errs.push(field(format!("{name}[{i}].text"), format!("added span {id} needs its text"))),
        }
    }
    for s in spans.iter().filter(|s| !seen.contains(&s.span_id)) {
        errs.push(field(name, format!("span {} is not labelled", s.span_id)));
    }
}

/// Whether two annotators' labels for an item disagree on any citation
/// (status, severity or detectability) or any fact status. Labels are
/// matched by span id for located spans and by text for added ones; a
/// span labelled by only one side is a disagreement. Likert scores are
/// not compared.
pub fn labels_disagree(a: &AnnotationRecord, b: &AnnotationRecord) -> bool {
    fn cit_key(l: &CitationSpanLabel) -> String {
        l.text.clone().unwrap_or_else(|| l.span_id.clone())
    }
    fn fact_key(l: &FactSpanLabel) -> String {
        l.text.clone().unwrap_or_else(|| l.span_id.clone())
    }
    let ca: BTreeMap<String, _> = a.citation_labels.iter().map(|l| (cit_key(l), (l.status, l.severity, l.detectability))).collect();
    let cb: BTreeMap<String, _> = b.citation_labels.iter().map(|l| (cit_key(l), (l.status, l.severity, l.detectability))).collect();
    let fa: BTreeMap<String, _> = a.fact_labels.iter().map(|l| (fact_key(l), l.status)).collect();
    let fb: BTreeMap<String, _> = b.fact_labels.iter().map(|l| (fact_key(l), l.status)).collect();
    ca != cb || fa != fb
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelOrigin {
    /// Both annotators gave the same labels.
    Agreement,
    /// The arbiter's resolution.
    Arbitration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedItem {
    pub item_id: String,
    pub origin: LabelOrigin,
    pub citation_labels: Vec<CitationSpanLabel>,
    pub fact_labels: Vec<FactSpanLabel>,
    /// Per-annotator usefulness scores.
    pub likert: BTreeMap<String, Vec<u8>>,
    pub review_minutes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyExport {
    pub schema_version: u32,
    pub study_id: String,
    pub batch_id: String,
    pub items: Vec<ExportedItem>,
    /// Items left out because they lack a final label, with the reason.
    pub excluded: BTreeMap<String, String>,
}

/// How per-annotator Likert scores combine into one score per argument.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikertRule {
    #[default]
    Mean,
    Median,
    /// Highest score, i.e. useful to any annotator.
    Max,
    Min,
}

impl std::str::FromStr for LikertRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(LikertRule::Mean),
            "median" => Ok(LikertRule::Median),
            "max" | "any" => Ok(LikertRule::Max),
            "min" => Ok(LikertRule::Min),
            _ => Err(format!("unknown likert rule {s:?}")),
        }
    }
}

/// Combines per-annotator vectors position by position. Positions scored
/// by nobody are dropped. Returns whole scores by rounding half up, so a
/// mean of 3.5 counts as 4.
pub fn combine_likert(per_annotator: &BTreeMap<String, Vec<u8>>, rule: LikertRule) -> Vec<u8> {
    let len = per_annotator.values().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .filter_map(|i| {
            let mut v: Vec<f64> = per_annotator.values().filter_map(|s| s.get(i)).map(|&x| f64::from(x)).collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            let x = match rule {
                LikertRule::Mean => v.iter().sum::<f64>() / v.len() as f64,
                LikertRule::Median => {
                    let n = v.len();
                    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
                }
                LikertRule::Max => v[v.len() - 1],
                LikertRule::Min => v[0],
            };
            Some((x + 0.5).floor() as u8)
        })
        .collect()
}

fn citation_key_text(text: &str) -> String {
    text.parse::<CitationKey>().map(|k| k.normalized()).unwrap_or_else(|_| text.trim().to_string())
}

/// Human labels per record, keyed back through the blinding map. Items
/// missing from the map are skipped.
pub fn human_labels(export: &StudyExport, map: &BlindingMap, rule: LikertRule) -> Vec<ResponseLabels> {
    let by_item = map.by_item();
    export
        .items
        .iter()
        .filter_map(|it| {
            let entry = by_item.get(it.item_id.as_str())?;
            let minutes: Vec<f64> = it.review_minutes.values().copied().collect();
            Some(ResponseLabels {
                record_id: entry.record_id.clone(),
                source: LabelSource::Human,
                citations: it
                    .citation_labels
                    .iter()
                    .map(|l| CitationLabel {
                        key: citation_key_text(l.text.as_deref().unwrap_or(&l.span_id)),
                        status: l.status,
                        severity: l.severity,
                        detectability: l.detectability,
                    })
                    .collect(),
                facts: it
                    .fact_labels
                    .iter()
                    .map(|l| FactLabel { claim: l.text.clone().unwrap_or_else(|| l.span_id.clone()), status: l.status })
                    .collect(),
                likert: combine_likert(&it.likert, rule),
                review_minutes: (!minutes.is_empty()).then(|| minutes.iter().sum::<f64>() / minutes.len() as f64),
            })
        })
        .collect()
}
