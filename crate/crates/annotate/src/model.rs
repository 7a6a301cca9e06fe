//! Study state and the pure transitions over it.

use std::collections::{BTreeMap, BTreeSet};

use archivist_core::annotation::{
    assign_slots, labels_disagree, AnnotationRecord, BlindedBatch, BlindedItem, ExportedItem, FieldError, LabelOrigin,
    StudyExport, BATCH_SCHEMA_VERSION,
};
use archivist_core::stats::cohens_kappa;
use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_OVERLAP: f64 = 0.20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotator {
    pub id: String,
    #[serde(default)]
    pub display_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyState {
    Open,
    Arbitration,
    Closed,
}

/// Whether the arbiter is shown the two conflicting label sets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArbiterMode {
    #[default]
    ShowLabels,
    Blind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentKind {
    Annotation,
    Arbitration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentState {
    Pending,
    InProgress,
    Submitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub assignment_id: String,
    pub item_id: String,
    pub annotator: String,
    pub kind: AssignmentKind,
    pub state: AssignmentState,
    pub started_at: Option<DateTime<Utc>>,
    pub submitted_at: Option<DateTime<Utc>>,
    pub record: Option<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationCase {
    pub case_id: String,
    pub item_id: String,
    /// The two conflicting label sets.
    pub labels: Vec<AnnotationRecord>,
    pub arbiter: String,
    pub assignment_id: String,
    pub resolution: Option<AnnotationRecord>,
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub study_id: String,
    pub batch: BlindedBatch,
    pub roster: Vec<Annotator>,
    pub overlap: f64,
    /// Items whose double labels feed the agreement statistics.
    pub overlap_items: Vec<String>,
    pub state: StudyState,
    pub arbiter_mode: ArbiterMode,
    pub assignments: Vec<Assignment>,
    pub cases: Vec<ArbitrationCase>,
    /// Token digest to annotator id.
    pub tokens: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("roster has {got} annotators, need at least {need}")]
    RosterTooSmall { need: usize, got: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("not allowed: {0}")]
    Forbidden(String),
    #[error("assignment {0} has not been started")]
    NotStarted(String),
    #[error("assignment {0} was already submitted")]
    AlreadySubmitted(String),
    #[error("study is {0:?}")]
    WrongState(StudyState),
    #[error("labels failed validation")]
    Schema(Vec<FieldError>),
    #[error("{0}")]
    Incomplete(String),
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::RosterTooSmall { .. } => "roster_too_small",
            ModelError::InvalidBatch(_) => "invalid_batch",
            ModelError::BadRequest(_) => "bad_request",
            ModelError::NotFound(_) => "not_found",
            ModelError::Forbidden(_) => "forbidden",
            ModelError::NotStarted(_) => "not_started",
            ModelError::AlreadySubmitted(_) => "already_submitted",
            ModelError::WrongState(StudyState::Closed) => "study_closed",
            ModelError::WrongState(_) => "wrong_state",
            ModelError::Schema(_) => "schema_violation",
            ModelError::Incomplete(_) => "incomplete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Event {
    StudyCreated { study: Box<Study> },
    Started { study_id: String, assignment_id: String, at: DateTime<Utc> },
    Submitted { study_id: String, assignment_id: String, record: Box<AnnotationRecord>, at: DateTime<Utc> },
    ArbitrationOpened { study_id: String, cases: Vec<ArbitrationCase>, assignments: Vec<Assignment>, state: StudyState },
}

pub fn token_digest(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct StudyRequest {
    pub batch: BlindedBatch,
    pub roster: Vec<Annotator>,
    #[serde(default)]
    pub overlap: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub arbiter_mode: ArbiterMode,
}

fn check_batch(batch: &BlindedBatch) -> Result<(), ModelError> {
    if batch.schema_version != BATCH_SCHEMA_VERSION {
        return Err(ModelError::InvalidBatch(format!("schema version {} is not supported", batch.schema_version)));
    }
    if batch.items.is_empty() {
        return Err(ModelError::InvalidBatch("no items".into()));
    }
    let mut ids = BTreeSet::new();
    for it in &batch.items {
        if !ids.insert(it.item_id.as_str()) {
            return Err(ModelError::InvalidBatch(format!("duplicate item {}", it.item_id)));
        }
        for s in it.citation_spans.iter().chain(&it.fact_spans) {
            if it.response.get(s.start..s.end) != Some(s.text.as_str()) {
                return Err(ModelError::InvalidBatch(format!("{}: span {} does not match the response", it.item_id, s.span_id)));
            }
        }
    }
    Ok(())
}

/// Uses the batch's slots when they give every item two distinct roster
/// members, otherwise deals fresh slots over a seeded roster order.
fn plan_slots(batch: &BlindedBatch, roster: &[Annotator], seed: u64) -> Result<Vec<(String, String)>, ModelError> {
    let members: BTreeSet<&str> = roster.iter().map(|a| a.id.as_str()).collect();
    let mut per_item: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in &batch.assignments {
        per_item.entry(s.item_id.as_str()).or_default().insert(s.annotator.as_str());
    }
    let usable = batch.assignments.len() == 2 * batch.items.len()
        && batch.assignments.iter().all(|s| members.contains(s.annotator.as_str()))
        && batch.items.iter().all(|it| per_item.get(it.item_id.as_str()).is_some_and(|a| a.len() == 2));
    if usable {
        return Ok(batch.assignments.iter().map(|s| (s.item_id.clone(), s.annotator.clone())).collect());
    }
    let mut order: Vec<String> = roster.iter().map(|a| a.id.clone()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let ids: Vec<String> = batch.items.iter().map(|i| i.item_id.clone()).collect();
    let slots = assign_slots(&ids, &order).map_err(|e| ModelError::BadRequest(e.to_string()))?;
    Ok(slots.into_iter().map(|s| (s.item_id, s.annotator)).collect())
}

/// Rounds up so that any positive fraction flags at least one item.
pub fn overlap_count(n_items: usize, fraction: f64) -> usize {
    (((n_items as f64) * fraction - 1e-9).ceil().max(0.0) as usize).min(n_items)
}

/// Builds a new study. `tokens` maps annotator ids to the bearer tokens
/// issued for them; only their digests are kept.
pub fn create_study(req: StudyRequest, tokens: &BTreeMap<String, String>) -> Result<Study, ModelError> {
    if req.roster.len() < 2 {
        return Err(ModelError::RosterTooSmall { need: 2, got: req.roster.len() });
    }
    let mut ids = BTreeSet::new();
    if let Some(a) = req.roster.iter().find(|a| a.id.trim().is_empty() || !ids.insert(a.id.as_str())) {
        return Err(ModelError::BadRequest(format!("annotator id {:?} is empty or repeated", a.id)));
    }
    let overlap = req.overlap.unwrap_or(DEFAULT_OVERLAP);
    if !(0.0..=1.0).contains(&overlap) {
        return Err(ModelError::BadRequest(format!("overlap {overlap} is outside [0, 1]")));
    }
    check_batch(&req.batch)?;
    let seed = req.seed.unwrap_or(0);
    let slots = plan_slots(&req.batch, &req.roster, seed)?;

    let digest = Sha256::digest(format!("archivist-study/v1|{}|{seed}", req.batch.batch_id));
    let study_id = format!("study-{}", hex::encode(&digest[..6]));
    let assignments = slots
        .into_iter()
        .enumerate()
        .map(|(i, (item_id, annotator))| Assignment {
            assignment_id: format!("{study_id}-a{:04}", i + 1),
            item_id,
            annotator,
            kind: AssignmentKind::Annotation,
            state: AssignmentState::Pending,
            started_at: None,
            submitted_at: None,
            record: None,
        })
        .collect();

    let mut item_ids: Vec<String> = req.batch.items.iter().map(|i| i.item_id.clone()).collect();
    item_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6f76_6572_6c61_7021));
    let mut overlap_items: Vec<String> = item_ids.into_iter().take(overlap_count(req.batch.items.len(), overlap)).collect();
    overlap_items.sort();

    Ok(Study {
        study_id,
        batch: req.batch,
        roster: req.roster,
        overlap,
        overlap_items,
        state: StudyState::Open,
        arbiter_mode: req.arbiter_mode,
        assignments,
        cases: Vec::new(),
        tokens: tokens.iter().map(|(a, t)| (token_digest(t), a.clone())).collect(),
    })
}

impl Study {
    pub fn annotator_for_token(&self, token: &str) -> Option<&str> {
        self.tokens.get(&token_digest(token)).map(String::as_str)
    }

    pub fn item(&self, item_id: &str) -> Option<&BlindedItem> {
        self.batch.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn assignment(&self, id: &str) -> Option<&Assignment> {
        self.assignments.iter().find(|a| a.assignment_id == id)
    }

    fn assignment_mut(&mut self, id: &str) -> Option<&mut Assignment> {
        self.assignments.iter_mut().find(|a| a.assignment_id == id)
    }

    /// The annotator's next unsubmitted assignment: one in progress if
    /// any, else the first pending one. Nothing once the study is closed.
    pub fn queue_head(&self, annotator: &str) -> Option<&Assignment> {
        if self.state == StudyState::Closed {
            return None;
        }
        let mine = || self.assignments.iter().filter(move |a| a.annotator == annotator);
        mine()
            .find(|a| a.state == AssignmentState::InProgress)
            .or_else(|| mine().find(|a| a.state == AssignmentState::Pending && self.accepts(a.kind)))
    }

    pub fn pending_count(&self, annotator: &str) -> usize {
        if self.state == StudyState::Closed {
            return 0;
        }
        self.assignments.iter().filter(|a| a.annotator == annotator && a.state != AssignmentState::Submitted).count()
    }

    fn accepts(&self, kind: AssignmentKind) -> bool {
        matches!(
            (self.state, kind),
            (StudyState::Open, AssignmentKind::Annotation) | (StudyState::Arbitration, AssignmentKind::Arbitration)
        )
    }

    /// Submitted annotation records per item, in assignment order.
    fn records_by_item(&self) -> BTreeMap<&str, Vec<&AnnotationRecord>> {
        let mut m: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
        for a in self.assignments.iter().filter(|a| a.kind == AssignmentKind::Annotation) {
            if let Some(r) = &a.record {
                m.entry(a.item_id.as_str()).or_default().push(r);
            }
        }
        m
    }

    pub fn apply(&mut self, event: &Event) {
        match event {
            Event::StudyCreated { .. } => {}
            Event::Started { assignment_id, at, .. } => {
                if let Some(a) = self.assignment_mut(assignment_id) {
                    a.state = AssignmentState::InProgress;
                    a.started_at = Some(*at);
                }
            }
            Event::Submitted { assignment_id, record, at, .. } => {
                let Some(a) = self.assignment_mut(assignment_id) else { return };
                a.state = AssignmentState::Submitted;
                a.submitted_at = Some(*at);
                a.record = Some((**record).clone());
                if a.kind == AssignmentKind::Arbitration {
                    let id = a.assignment_id.clone();
                    if let Some(c) = self.cases.iter_mut().find(|c| c.assignment_id == id) {
                        c.resolution = Some((**record).clone());
                        c.resolved = true;
                    }
                    if self.cases.iter().all(|c| c.resolved) {
                        self.state = StudyState::Closed;
                    }
                }
            }
            Event::ArbitrationOpened { cases, assignments, state, .. } => {
                self.cases = cases.clone();
                self.assignments.extend(assignments.iter().cloned());
                self.state = *state;
            }
        }
    }
}

/// Event that starts the annotator's queue head, if it is still pending.
pub fn start_head(study: &Study, annotator: &str, now: DateTime<Utc>) -> Option<Event> {
    let head = study.queue_head(annotator)?;
    (head.state == AssignmentState::Pending).then(|| Event::Started {
        study_id: study.study_id.clone(),
        assignment_id: head.assignment_id.clone(),
        at: now,
    })
}

pub fn submit(study: &Study, assignment_id: &str, annotator: &str, mut record: AnnotationRecord, now: DateTime<Utc>) -> Result<Event, ModelError> {
    let a = study.assignment(assignment_id).ok_or_else(|| ModelError::NotFound(format!("assignment {assignment_id}")))?;
    if a.annotator != annotator {
        return Err(ModelError::Forbidden(format!("assignment {assignment_id} belongs to another annotator")));
    }
    match a.state {
        AssignmentState::Submitted => return Err(ModelError::AlreadySubmitted(assignment_id.into())),
        AssignmentState::Pending => return Err(ModelError::NotStarted(assignment_id.into())),
        AssignmentState::InProgress => {}
    }
    if !study.accepts(a.kind) {
        return Err(ModelError::WrongState(study.state));
    }
    let item = study.item(&a.item_id).ok_or_else(|| ModelError::NotFound(format!("item {}", a.item_id)))?;
    if record.response_id.is_empty() {
        record.response_id = item.item_id.clone();
    }
    let mut errs = Vec::new();
    if !record.annotator_id.is_empty() && record.annotator_id != annotator {
        errs.push(FieldError { field: "annotator_id".into(), message: format!("expected {annotator}") });
    }
    if let Err(mut e) = record.validate(item) {
        errs.append(&mut e);
    }
    if !errs.is_empty() {
        return Err(ModelError::Schema(errs));
    }
    record.annotator_id = annotator.to_string();
    if record.review_minutes.is_none() {
        let started = a.started_at.unwrap_or(now);
        record.review_minutes = Some(((now - started).num_milliseconds().max(0) as f64) / 60_000.0);
    }
    record.timestamp.get_or_insert(now);
    Ok(Event::Submitted { study_id: study.study_id.clone(), assignment_id: assignment_id.into(), record: Box::new(record), at: now })
}

/// Opens arbitration: one case per item whose two label sets disagree,
/// each given to the roster member with the fewest cases so far among
/// those not on the item. With no disagreement the study closes.
pub fn open_arbitration(study: &Study) -> Result<Option<Event>, ModelError> {
    if study.state != StudyState::Open {
        return Ok(None);
    }
    let pending = study.assignments.iter().filter(|a| a.state != AssignmentState::Submitted).count();
    if pending > 0 {
        return Err(ModelError::Incomplete(format!("{pending} assignments are not submitted")));
    }
    let records = study.records_by_item();
    let disagreeing: Vec<(&str, &Vec<&AnnotationRecord>)> = study
        .batch
        .items
        .iter()
        .filter_map(|it| records.get_key_value(it.item_id.as_str()).map(|(k, v)| (*k, v)))
        .filter(|(_, rs)| rs.len() == 2 && labels_disagree(rs[0], rs[1]))
        .collect();
    if !disagreeing.is_empty() && study.roster.len() < 3 {
        return Err(ModelError::RosterTooSmall { need: 3, got: study.roster.len() });
    }
    let mut load: BTreeMap<&str, usize> = study.roster.iter().map(|a| (a.id.as_str(), 0)).collect();
    let mut cases = Vec::new();
    let mut assignments = Vec::new();
    let base = study.assignments.len();
    for (i, (item_id, rs)) in disagreeing.iter().enumerate() {
        let on_item: BTreeSet<&str> = rs.iter().map(|r| r.annotator_id.as_str()).collect();
        let arbiter = study
            .roster
            .iter()
            .filter(|a| !on_item.contains(a.id.as_str()))
            .min_by_key(|a| load[a.id.as_str()])
            .expect("roster of three has a member off the item")
            .id
            .clone();
        *load.get_mut(arbiter.as_str()).expect("roster member") += 1;
        let assignment_id = format!("{}-a{:04}", study.study_id, base + i + 1);
        cases.push(ArbitrationCase {
            case_id: format!("{}-case{:03}", study.study_id, i + 1),
            item_id: item_id.to_string(),
            labels: rs.iter().map(|r| (*r).clone()).collect(),
            arbiter: arbiter.clone(),
            assignment_id: assignment_id.clone(),
            resolution: None,
            resolved: false,
        });
        assignments.push(Assignment {
            assignment_id,
            item_id: item_id.to_string(),
            annotator: arbiter,
            kind: AssignmentKind::Arbitration,
            state: AssignmentState::Pending,
            started_at: None,
            submitted_at: None,
            record: None,
        });
    }
    let state = if cases.is_empty() { StudyState::Closed } else { StudyState::Arbitration };
    Ok(Some(Event::ArbitrationOpened { study_id: study.study_id.clone(), cases, assignments, state }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyKappa {
    /// Undefined when the subset has no spans of this family.
    pub kappa: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub study_id: String,
    pub subset_items: usize,
    pub families: BTreeMap<String, FamilyKappa>,
}

fn family<T: Ord>(a: Vec<T>, b: Vec<T>) -> FamilyKappa {
    FamilyKappa { n_pairs: a.len(), kappa: cohens_kappa(&a, &b).ok() }
}

/// Cohen's kappa over the overlap subset for each label family, pairing
/// labels on pre-located spans. Families: full citation status, full
/// fact status, and the binary false-citation and fabricated-fact calls.
pub fn study_kappa(study: &Study) -> Result<KappaReport, ModelError> {
    let records = study.records_by_item();
    let mut cit = (Vec::new(), Vec::new());
    let mut fact = (Vec::new(), Vec::new());
    for id in &study.overlap_items {
        let rs = records.get(id.as_str()).filter(|r| r.len() == 2).ok_or_else(|| {
            ModelError::Incomplete(format!("overlap item {id} does not have two submitted label sets"))
        })?;
        let item = study.item(id).ok_or_else(|| ModelError::NotFound(format!("item {id}")))?;
        for s in &item.citation_spans {
            let find = |r: &AnnotationRecord| r.citation_labels.iter().find(|l| l.span_id == s.span_id).map(|l| l.status);
            if let (Some(x), Some(y)) = (find(rs[0]), find(rs[1])) {
                cit.0.push(x);
                cit.1.push(y);
            }
        }
        for s in &item.fact_spans {
            let find = |r: &AnnotationRecord| r.fact_labels.iter().find(|l| l.span_id == s.span_id).map(|l| l.status);
            if let (Some(x), Some(y)) = (find(rs[0]), find(rs[1])) {
                fact.0.push(x);
                fact.1.push(y);
            }
        }
    }
    let mut families = BTreeMap::new();
    let bin = |v: &[archivist_core::verification::CitationStatus]| v.iter().map(|s| s.is_false()).collect::<Vec<_>>();
    let fbin = |v: &[archivist_core::verification::FactStatus]| v.iter().map(|s| s.is_fabricated()).collect::<Vec<_>>();
    families.insert("false-citation".to_string(), family(bin(&cit.0), bin(&cit.1)));
    families.insert("fabricated-fact".to_string(), family(fbin(&fact.0), fbin(&fact.1)));
    families.insert("citation-status".to_string(), family(cit.0, cit.1));
    families.insert("fact-status".to_string(), family(fact.0, fact.1));
    Ok(KappaReport { study_id: study.study_id.clone(), subset_items: study.overlap_items.len(), families })
}

/// Final labels per item: the shared labels when the two annotators
/// agree, the arbiter's resolution when they did not.
pub fn export(study: &Study) -> StudyExport {
    let records = study.records_by_item();
    let mut items = Vec::new();
    let mut excluded = BTreeMap::new();
    for it in &study.batch.items {
        let Some(rs) = records.get(it.item_id.as_str()).filter(|r| r.len() == 2) else {
            excluded.insert(it.item_id.clone(), "awaiting labels".into());
            continue;
        };
        let (origin, labels) = if !labels_disagree(rs[0], rs[1]) {
            (LabelOrigin::Agreement, rs[0])
        } else if let Some(r) = study.cases.iter().find(|c| c.item_id == it.item_id).and_then(|c| c.resolution.as_ref()) {
            (LabelOrigin::Arbitration, r)
        } else {
            excluded.insert(it.item_id.clone(), "disagreement awaiting arbitration".into());
            continue;
        };
        items.push(ExportedItem {
            item_id: it.item_id.clone(),
            origin,
            citation_labels: labels.citation_labels.clone(),
            fact_labels: labels.fact_labels.clone(),
            likert: rs.iter().map(|r| (r.annotator_id.clone(), r.likert.clone())).collect(),
            review_minutes: rs.iter().filter_map(|r| r.review_minutes.map(|m| (r.annotator_id.clone(), m))).collect(),
        });
    }
    StudyExport {
        schema_version: BATCH_SCHEMA_VERSION,
        study_id: study.study_id.clone(),
        batch_id: study.batch.batch_id.clone(),
        items,
        excluded,
    }
}
