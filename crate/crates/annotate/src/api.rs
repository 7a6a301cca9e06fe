//! JSON API over the store.

use std::collections::BTreeMap;
use std::sync::Arc;

use archivist_core::annotation::{AnnotationRecord, BlindedItem, FieldError};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{self, Assignment, AssignmentKind, ArbiterMode, ArbitrationCase, Event, ModelError, StudyRequest, StudyState};
use crate::store::{Store, StoreError};

pub const SCHEMA_HEADER: &str = "x-archivist-schema";
pub const API_SCHEMA_VERSION: &str = "1";

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub admin_token: Arc<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), fields: Vec::new() }
    }

    fn unauthorized() -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or unknown bearer token")
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        let status = match &e {
            ModelError::NotFound(_) => StatusCode::NOT_FOUND,
            ModelError::Forbidden(_) => StatusCode::FORBIDDEN,
            ModelError::AlreadySubmitted(_) | ModelError::NotStarted(_) | ModelError::WrongState(_) | ModelError::Incomplete(_) => {
                StatusCode::CONFLICT
            }
            ModelError::RosterTooSmall { .. } | ModelError::InvalidBatch(_) | ModelError::Schema(_) | ModelError::BadRequest(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
        };
        let fields = if let ModelError::Schema(f) = &e { f.clone() } else { Vec::new() };
        let message = match &e {
            ModelError::Schema(f) => f.iter().map(|f| format!("{}: {}", f.field, f.message)).collect::<Vec<_>>().join("; "),
            _ => e.to_string(),
        };
        ApiError { status, code: e.code(), message, fields }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Model(m) => m.into(),
            other => {
                tracing::error!(error = %other, "store failure");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", "the event log could not be written")
            }
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    fields: &'a [FieldError],
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: ErrorDetail { code: self.code, message: &self.message, fields: &self.fields } };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

fn require_admin(st: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    match bearer(headers) {
        Some(t) if t == st.admin_token.as_str() => Ok(()),
        _ => Err(ApiError::unauthorized()),
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "schema_violation", e.to_string()))
}

fn new_token() -> String {
    let bytes: [u8; 24] = rand::rng().random();
    hex::encode(bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreatedStudy {
    pub study_id: String,
    pub state: StudyState,
    pub n_items: usize,
    pub n_assignments: usize,
    pub overlap_items: usize,
    /// Bearer token per annotator; shown only here.
    pub tokens: BTreeMap<String, String>,
}

async fn create_study(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<(StatusCode, Json<CreatedStudy>)> {
    require_admin(&st, &headers)?;
    let req: StudyRequest = parse_json(&body)?;
    let tokens: BTreeMap<String, String> = req.roster.iter().map(|a| (a.id.clone(), new_token())).collect();
    let study = model::create_study(req, &tokens)?;
    let created = CreatedStudy {
        study_id: study.study_id.clone(),
        state: study.state,
        n_items: study.batch.items.len(),
        n_assignments: study.assignments.len(),
        overlap_items: study.overlap_items.len(),
        tokens,
    };
    st.store.write(|state, _| {
        if state.studies.contains_key(&study.study_id) {
            return Err(ModelError::BadRequest(format!("study {} already exists", study.study_id)));
        }
        Ok((vec![Event::StudyCreated { study: Box::new(study) }], ()))
    })?;
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueItem {
    pub assignment_id: String,
    pub kind: AssignmentKind,
    pub started_at: Option<DateTime<Utc>>,
    pub item: BlindedItem,
    /// For arbitration in show-labels mode: the two conflicting records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflicting_labels: Option<Vec<AnnotationRecord>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueView {
    pub study_id: String,
    pub annotator: String,
    pub study_state: StudyState,
    pub remaining: usize,
    pub head: Option<QueueItem>,
}

fn queue_view(study: &model::Study, annotator: &str) -> QueueView {
    let head = study.queue_head(annotator).and_then(|a: &Assignment| {
        let item = study.item(&a.item_id)?.clone();
        let conflicting_labels = (a.kind == AssignmentKind::Arbitration && study.arbiter_mode == ArbiterMode::ShowLabels)
            .then(|| study.cases.iter().find(|c| c.assignment_id == a.assignment_id).map(|c| c.labels.clone()))
            .flatten();
        Some(QueueItem { assignment_id: a.assignment_id.clone(), kind: a.kind, started_at: a.started_at, item, conflicting_labels })
    });
    QueueView {
        study_id: study.study_id.clone(),
        annotator: annotator.to_string(),
        study_state: study.state,
        remaining: study.pending_count(annotator),
        head,
    }
}

fn annotator_auth(study: &model::Study, headers: &HeaderMap) -> ApiResult<String> {
    let token = bearer(headers).ok_or_else(ApiError::unauthorized)?;
    study.annotator_for_token(token).map(String::from).ok_or_else(ApiError::unauthorized)
}

/// Returns the annotator's queue, starting its head assignment.
async fn queue(State(st): State<AppState>, headers: HeaderMap, Path((study_id, annotator)): Path<(String, String)>) -> ApiResult<Json<QueueView>> {
    let view = st.store.write(|state, now| {
        let study = state.studies.get(&study_id).ok_or_else(|| ModelError::NotFound(format!("study {study_id}")))?;
        let who = annotator_auth(study, &headers).map_err(|_| ModelError::Forbidden("token does not match".into()))?;
        if who != annotator {
            return Err(ModelError::Forbidden("queues are private to their annotator".into()));
        }
        let mut s = study.clone();
        let events: Vec<Event> = model::start_head(study, &annotator, now).into_iter().collect();
        for e in &events {
            s.apply(e);
        }
        Ok((events, queue_view(&s, &annotator)))
    });
    match view {
        Err(StoreError::Model(ModelError::Forbidden(_))) => Err(ApiError::unauthorized()),
        other => Ok(Json(other?)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitResult {
    pub accepted: bool,
    pub assignment_id: String,
    pub review_minutes: f64,
    pub next: Option<QueueItem>,
}

async fn submit_labels(State(st): State<AppState>, headers: HeaderMap, Path(assignment_id): Path<String>, body: Bytes) -> ApiResult<Json<SubmitResult>> {
    let snap = st.store.snapshot();
    let study_id = snap
        .studies
        .values()
        .find(|s| s.assignment(&assignment_id).is_some())
        .map(|s| s.study_id.clone())
        .ok_or_else(|| ApiError::from(ModelError::NotFound(format!("assignment {assignment_id}"))))?;
    let who = annotator_auth(&snap.studies[&study_id], &headers)?;
    let record: AnnotationRecord = parse_json(&body)?;
    let out = st.store.write(|state, now| {
        let study = &state.studies[&study_id];
        let submitted = model::submit(study, &assignment_id, &who, record, now)?;
        let mut s = study.clone();
        s.apply(&submitted);
        let minutes = match &submitted {
            Event::Submitted { record, .. } => record.review_minutes.unwrap_or(0.0),
            _ => 0.0,
        };
        let mut events = vec![submitted];
        if let Some(e) = model::start_head(&s, &who, now) {
            s.apply(&e);
            events.push(e);
        }
        let next = queue_view(&s, &who).head;
        Ok((events, SubmitResult { accepted: true, assignment_id: assignment_id.clone(), review_minutes: minutes, next }))
    })?;
    Ok(Json(out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArbitrationView {
    pub study_id: String,
    pub state: StudyState,
    pub cases: Vec<ArbitrationCase>,
}

async fn arbitration(State(st): State<AppState>, headers: HeaderMap, Path(study_id): Path<String>) -> ApiResult<Json<ArbitrationView>> {
    require_admin(&st, &headers)?;
    let out = st.store.write(|state, _| {
        let study = state.studies.get(&study_id).ok_or_else(|| ModelError::NotFound(format!("study {study_id}")))?;
        let mut s = study.clone();
        let events: Vec<Event> = model::open_arbitration(study)?.into_iter().collect();
        for e in &events {
            s.apply(e);
        }
        Ok((events, ArbitrationView { study_id: s.study_id.clone(), state: s.state, cases: s.cases.clone() }))
    })?;
    Ok(Json(out))
}

async fn kappa(State(st): State<AppState>, headers: HeaderMap, Path(study_id): Path<String>) -> ApiResult<Json<model::KappaReport>> {
    require_admin(&st, &headers)?;
    let snap = st.store.snapshot();
    let study = snap.studies.get(&study_id).ok_or_else(|| ApiError::from(ModelError::NotFound(format!("study {study_id}"))))?;
    Ok(Json(model::study_kappa(study)?))
}

async fn export(State(st): State<AppState>, headers: HeaderMap, Path(study_id): Path<String>) -> ApiResult<Json<archivist_core::annotation::StudyExport>> {
    require_admin(&st, &headers)?;
    let snap = st.store.snapshot();
    let study = snap.studies.get(&study_id).ok_or_else(|| ApiError::from(ModelError::NotFound(format!("study {study_id}"))))?;
    Ok(Json(model::export(study)))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn schema_header(res: Response) -> Response {
    let mut res = res;
    res.headers_mut().insert(SCHEMA_HEADER, HeaderValue::from_static(API_SCHEMA_VERSION));
    res
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/studies", post(create_study))
        .route("/studies/{id}/queue/{annotator}", get(queue))
        .route("/assignments/{id}/labels", post(submit_labels))
        .route("/studies/{id}/arbitration", post(arbitration))
        .route("/studies/{id}/kappa", get(kappa))
        .route("/studies/{id}/export", get(export))
        .fallback(not_found)
        .layer(axum::middleware::map_response(schema_header))
        .with_state(state)
}

/// Serves the API until the listener closes.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
