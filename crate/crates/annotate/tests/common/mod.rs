#![allow(dead_code)]

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use archivist_annotate::{router, AppState, Store};
use archivist_core::annotation::{BlindedBatch, BlindedItem, LocatedSpan, TaskMaterials, BATCH_SCHEMA_VERSION};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const ADMIN: &str = "admin-secret";

/// Clock that moves 30 seconds forward on every reading.
pub fn ticking_clock() -> archivist_annotate::store::Clock {
    let t = Arc::new(AtomicI64::new(1_700_000_000));
    Arc::new(move || Utc.timestamp_opt(t.fetch_add(30, Ordering::SeqCst), 0).unwrap())
}

fn span(response: &str, id: &str, text: &str) -> LocatedSpan {
    let start = response.find(text).expect("span text in response");
    LocatedSpan { span_id: id.into(), start, end: start + text.len(), text: text.into() }
}

/// Item with one citation span `c1` and one fact span `f1`.
pub fn item(i: usize) -> BlindedItem {
    let cit = format!("STS {}/2020", i + 1);
    let fact = format!("La fianza ascendía a {} euros.", 100 * (i + 1));
    let response = format!("# Dictamen\n\n{fact}\n\nConforme a la {cit}, procede la devolución.\n");
    BlindedItem {
        item_id: format!("item-{:04}", i + 1),
        materials: TaskMaterials { scenario: "Reclamación de fianza.".into(), brief: "El arrendatario reclama.".into(), annexes: vec![] },
        citation_spans: vec![span(&response, "c1", &cit)],
        fact_spans: vec![span(&response, "f1", &fact)],
        response,
    }
}

pub fn batch(n: usize) -> BlindedBatch {
    BlindedBatch { schema_version: BATCH_SCHEMA_VERSION, batch_id: format!("batch-test{n}"), items: (0..n).map(item).collect(), assignments: vec![] }
}

pub fn roster(ids: &[&str]) -> Value {
    Value::Array(ids.iter().map(|id| json!({"id": id, "display_name": id.to_uppercase()})).collect())
}

pub fn labels(item_id: &str, citation: &str, fact: &str, likert: &[u8]) -> Value {
    json!({
        "response_id": item_id,
        "citation_labels": [{"span_id": "c1", "status": citation}],
        "fact_labels": [{"span_id": "f1", "status": fact}],
        "likert": likert,
    })
}

pub struct Harness {
    pub app: Router,
    /// Every response body seen, for leak checks.
    pub bodies: Vec<String>,
}

pub struct Reply {
    pub status: StatusCode,
    pub schema: Option<String>,
    pub body: Value,
}

impl Harness {
    pub fn new() -> Self {
        Self::with_store(Store::in_memory(ticking_clock()))
    }

    pub fn with_store(store: Store) -> Self {
        let state = AppState { store: Arc::new(store), admin_token: Arc::new(ADMIN.to_string()) };
        Harness { app: router(state), bodies: Vec::new() }
    }

    pub async fn call(&mut self, method: &str, uri: &str, token: Option<&str>, body: Option<&Value>) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let schema = res.headers().get("x-archivist-schema").map(|v| v.to_str().unwrap().to_string());
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        let text = String::from_utf8(bytes.to_vec()).unwrap();
        self.bodies.push(text.clone());
        let body = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
        Reply { status, schema, body }
    }

    /// Creates a study and returns its id and the issued tokens.
    pub async fn create(&mut self, request: Value) -> (String, Value) {
        let r = self.call("POST", "/studies", Some(ADMIN), Some(&request)).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
        (r.body["study_id"].as_str().unwrap().to_string(), r.body["tokens"].clone())
    }

    /// Drains an annotator's queue, labelling each item with `label(item_id)`.
    pub async fn drain(&mut self, study: &str, annotator: &str, token: &str, label: impl Fn(&str) -> Value) -> usize {
        let mut n = 0;
        let q = self.call("GET", &format!("/studies/{study}/queue/{annotator}"), Some(token), None).await;
        assert_eq!(q.status, StatusCode::OK, "{}", q.body);
        let mut head = q.body["head"].clone();
        while !head.is_null() {
            let id = head["assignment_id"].as_str().unwrap().to_string();
            let item_id = head["item"]["item_id"].as_str().unwrap().to_string();
            let r = self.call("POST", &format!("/assignments/{id}/labels"), Some(token), Some(&label(&item_id))).await;
            assert_eq!(r.status, StatusCode::OK, "{}", r.body);
            head = r.body["next"].clone();
            n += 1;
        }
        n
    }
}
