//! HTTP surface: case submission, streamed diagnosis and instruction
//! sessions. Streams are newline-delimited JSON, one [`StreamEvent`] per line.

use std::collections::HashSet;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use ddx_core::domain::{validate_case, DiagnosisResult, PatientCase, Violation};
use ddx_core::pipeline::{refine_with_instruction, run_pipeline_observed, PipelineConfig, PipelineError};
use ddx_core::setup::Setup;
use ddx_core::trace::{digest, Stage, StageRecord};

use crate::store::{DocumentStore, StoreError};

pub const DEFAULT_MAX_BODY: usize = 16 * 1024 * 1024;

const CASES: &str = "cases";
const RESULTS: &str = "results";
const SESSIONS: &str = "sessions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StreamEvent {
    Stage { record: StageRecord },
    Result { result: DiagnosisResult },
    Error { stage: Option<Stage>, message: String, trace: Vec<StageRecord> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    /// `None` for the opening turn, which holds the case's diagnosis.
    pub instruction: Option<String>,
    pub result_digest: String,
    pub result: DiagnosisResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub case_id: String,
    pub status: SessionStatus,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseCreated {
    pub case_id: String,
    pub submitted_case_id: String,
}

pub struct AppState {
    pub store: Arc<dyn DocumentStore>,
    pub setup: Arc<Setup>,
    busy: Mutex<HashSet<String>>,
}

impl AppState {
    pub fn new(store: Arc<dyn DocumentStore>, setup: Setup) -> Arc<Self> {
        Arc::new(AppState { store, setup: Arc::new(setup), busy: Mutex::new(HashSet::new()) })
    }
}

/// Releases a session's in-flight slot when dropped.
struct BusyGuard {
    state: Arc<AppState>,
    session_id: String,
}

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.state.busy.lock().unwrap_or_else(|p| p.into_inner()).remove(&self.session_id);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({ "error": message.into() }) }
    }

    fn invalid_case(violations: &[Violation]) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: json!({ "error": "case failed validation", "violations": violations }),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::BadId(id) => ApiError::new(StatusCode::NOT_FOUND, format!("no such id {id:?}")),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

pub fn router(state: Arc<AppState>, max_body: usize) -> Router {
    Router::new()
        .route("/cases", post(submit_case))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/diagnose", post(diagnose))
        .route("/cases/{id}/result", get(get_result))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/instruct", post(instruct))
        .route("/sessions/{id}/close", post(close_session))
        .route("/schemas/{name}", get(get_schema))
        .layer(DefaultBodyLimit::max(max_body))
        .with_state(state)
}

async fn submit_case(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<CaseCreated>)> {
    let mut case: PatientCase = parse_body(&body)?;
    let violations = validate_case(&case);
    if !violations.is_empty() {
        return Err(ApiError::invalid_case(&violations));
    }
    let case_id = format!("case-{}", uuid::Uuid::new_v4().simple());
    let submitted_case_id = std::mem::replace(&mut case.case_id, case_id.clone());
    st.store.put_typed(CASES, &case_id, &case)?;
    Ok((StatusCode::CREATED, Json(CaseCreated { case_id, submitted_case_id })))
}

fn load_case(st: &AppState, id: &str) -> ApiResult<PatientCase> {
    st.store.get_typed(CASES, id)?.ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown case {id}")))
}

async fn get_case(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<PatientCase>> {
    load_case(&st, &id).map(Json)
}

async fn get_result(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<DiagnosisResult>> {
    load_case(&st, &id)?;
    st.store
        .get_typed(RESULTS, &id)?
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("case {id} has no result yet")))
}

/// RFC 7386 merge patch: objects merge recursively, `null` removes a key,
/// anything else replaces.
fn merge_patch(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagnoseRequest {
    /// Merge patch over the server's pipeline configuration.
    #[serde(default)]
    config: Option<Value>,
}

fn effective_config(base: &PipelineConfig, body: &Bytes) -> ApiResult<PipelineConfig> {
    let req: DiagnoseRequest =
        if body.iter().all(u8::is_ascii_whitespace) { DiagnoseRequest::default() } else { parse_body(body)? };
    let Some(patch) = req.config else { return Ok(base.clone()) };
    let mut value = serde_json::to_value(base).expect("config serializes");
    merge_patch(&mut value, &patch);
    let config: PipelineConfig = serde_json::from_value(value)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid config: {e}")))?;
    config.validate().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid config: {e}")))?;
    Ok(config)
}

fn ndjson(rx: mpsc::UnboundedReceiver<StreamEvent>) -> Response {
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let event = rx.recv().await?;
        let mut line = serde_json::to_vec(&event).expect("events serialize");
        line.push(b'\n');
        Some((Ok::<_, Infallible>(Bytes::from(line)), rx))
    });
    ([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream)).into_response()
}

fn error_event(e: PipelineError) -> StreamEvent {
    StreamEvent::Error { stage: Some(e.stage), message: e.message, trace: e.trace }
}

async fn diagnose(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let case = load_case(&st, &id)?;
    let config = effective_config(&st.setup.config, &body)?;
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::task::spawn_blocking(move || {
        let mut observer = |r: &StageRecord| {
            let _ = tx.send(StreamEvent::Stage { record: r.clone() });
        };
        let event = match run_pipeline_observed(&case, &config, &st.setup.resources, &mut observer) {
            Ok(result) => match st.store.put_typed(RESULTS, &id, &result) {
                Ok(()) => StreamEvent::Result { result },
                Err(e) => StreamEvent::Error { stage: None, message: format!("result not stored: {e}"), trace: result.trace },
            },
            Err(e) => error_event(e),
        };
        let _ = tx.send(event);
    });
    Ok(ndjson(rx))
}

fn load_session(st: &AppState, id: &str) -> ApiResult<Session> {
    st.store
        .get_typed(SESSIONS, id)?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    case_id: String,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Session>)> {
    let req: CreateSession = parse_body(&body)?;
    load_case(&st, &req.case_id)?;
    let result: DiagnosisResult = st.store.get_typed(RESULTS, &req.case_id)?.ok_or_else(|| {
        ApiError::new(StatusCode::CONFLICT, format!("case {} has no result; diagnose it first", req.case_id))
    })?;
    let session = Session {
        session_id: format!("session-{}", uuid::Uuid::new_v4().simple()),
        case_id: req.case_id,
        status: SessionStatus::Open,
        turns: vec![Turn { index: 0, instruction: None, result_digest: digest(&result), result }],
    };
    st.store.put_typed(SESSIONS, &session.session_id, &session)?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Session>> {
    load_session(&st, &id).map(Json)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Instruct {
    instruction: String,
}

fn claim(st: &Arc<AppState>, session_id: &str) -> ApiResult<BusyGuard> {
    let mut busy = st.busy.lock().unwrap_or_else(|p| p.into_inner());
    if !busy.insert(session_id.to_string()) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("session {session_id} has a turn in flight")));
    }
    Ok(BusyGuard { state: st.clone(), session_id: session_id.to_string() })
}

async fn instruct(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: Instruct = parse_body(&body)?;
    let instruction = req.instruction.trim().to_string();
    if instruction.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "instruction must not be empty"));
    }
    let guard = claim(&st, &id)?;
    let session = load_session(&st, &id)?;
    if session.status == SessionStatus::Closed {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("session {id} is closed")));
    }
    let case = load_case(&st, &session.case_id)?;
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let previous = &session.turns.last().expect("sessions open with a turn").result;
        let mut observer = |r: &StageRecord| {
            let _ = tx.send(StreamEvent::Stage { record: r.clone() });
        };
        let res = &st.setup.resources;
        let event = match refine_with_instruction(&case, &st.setup.config, res, previous, &instruction, &mut observer) {
            Ok(result) => {
                let mut session = session;
                session.turns.push(Turn {
                    index: session.turns.len(),
                    instruction: Some(instruction),
                    result_digest: digest(&result),
                    result: result.clone(),
                });
                match st.store.put_typed(SESSIONS, &id, &session) {
                    Ok(()) => StreamEvent::Result { result },
                    Err(e) => {
                        StreamEvent::Error { stage: None, message: format!("turn not stored: {e}"), trace: result.trace }
                    }
                }
            }
            Err(e) => error_event(e),
        };
        let _ = tx.send(event);
    });
    Ok(ndjson(rx))
}

async fn close_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Session>> {
    let _guard = claim(&st, &id)?;
    let mut session = load_session(&st, &id)?;
    session.status = SessionStatus::Closed;
    st.store.put_typed(SESSIONS, &id, &session)?;
    Ok(Json(session))
}

async fn get_schema(Path(name): Path<String>) -> ApiResult<Response> {
    let name = name.strip_suffix(".json").unwrap_or(&name);
    let schema = crate::schemas::get(name)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no schema named {name}")))?;
    Ok(([(header::CONTENT_TYPE, "application/schema+json")], schema).into_response())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_patch_semantics() {
        let mut v = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge_patch(&mut v, &json!({"a": null, "b": {"c": 5}, "e": [1]}));
        assert_eq!(v, json!({"b": {"c": 5, "d": 3}, "e": [1]}));
    }

    #[test]
    fn config_patch_is_validated() {
        let base = PipelineConfig::default();
        assert_eq!(effective_config(&base, &Bytes::new()).unwrap(), base);
        let off = effective_config(&base, &Bytes::from(r#"{"config": {"tools": {"web": false}}}"#)).unwrap();
        assert!(!off.tools.web && off.tools.kb);
        let bad = effective_config(&base, &Bytes::from(r#"{"config": {"final_k": 1}}"#)).unwrap_err();
        assert_eq!(bad.status, StatusCode::BAD_REQUEST);
        assert!(effective_config(&base, &Bytes::from(r#"{"other": 1}"#)).is_err());
    }
}
