//! HTTP adapter for the annotation console. Handlers translate requests into
//! corpus calls and results into status codes; nothing else.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use terraexpr::corpus::{
    aggregate_annotations, annotation_progress, pending_images, AnnotationRecord, AnnotationStore,
    AppendError, Corpus, Expression, Origin, TiePolicy,
};

pub struct AppState {
    pub corpus: Corpus,
    pub store: AnnotationStore,
    pub policy: TiePolicy,
    /// Console assets; the API works without them.
    pub static_dir: Option<PathBuf>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/annotations", post(post_annotation))
        .route("/api/progress", get(progress))
        .route("/api/aggregate", get(aggregate))
        .route("/images/{id}", get(image))
        .fallback(static_file)
        .with_state(state)
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn unprocessable(violations: Vec<String>) -> Response {
    (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "violations": violations }))).into_response()
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Serialize)]
struct TaskView {
    image_id: String,
    image_url: String,
    annotator_id: String,
    posture: Option<String>,
    remaining: usize,
}

async fn next_task(State(st): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Response {
    let annotator = q.annotator.unwrap_or_default();
    if annotator.trim().is_empty() {
        return unprocessable(vec!["annotator must not be empty".into()]);
    }
    let pending = pending_images(&st.corpus, &st.store.records(), &annotator);
    match pending.first() {
        None => StatusCode::NO_CONTENT.into_response(),
        Some(r) => Json(TaskView {
            image_id: r.id.clone(),
            image_url: format!("/images/{}", r.id),
            annotator_id: annotator,
            posture: r.posture.map(|p| p.to_string()),
            remaining: pending.len(),
        })
        .into_response(),
    }
}

/// Choices arrive either as a list of names or as one comma-separated string.
#[derive(Deserialize)]
#[serde(untagged)]
enum Choices {
    List(Vec<String>),
    Joined(String),
}

#[derive(Deserialize)]
struct Submission {
    image_id: String,
    annotator_id: String,
    choices: Choices,
}

async fn post_annotation(State(st): State<Arc<AppState>>, Json(sub): Json<Submission>) -> Response {
    let names: Vec<String> = match sub.choices {
        Choices::List(v) => v,
        Choices::Joined(s) => s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect(),
    };
    let mut problems = Vec::new();
    let choices: Vec<Expression> = names
        .iter()
        .filter_map(|n| Expression::from_str(n).map_err(|e| problems.push(e)).ok())
        .collect();
    let known = st
        .corpus
        .get(&sub.image_id)
        .is_some_and(|r| r.origin == Origin::Collected);
    if !known {
        problems.push(format!("unknown image `{}`", sub.image_id));
    }
    let record = AnnotationRecord::new(sub.image_id, sub.annotator_id, choices);
    problems.extend(record.violations());
    if !problems.is_empty() {
        return unprocessable(problems);
    }
    let body = json!(record);
    match st.store.append(record) {
        Ok(()) => (StatusCode::CREATED, Json(body)).into_response(),
        Err(AppendError::Invalid(v)) => unprocessable(v),
        Err(e @ AppendError::Duplicate { .. }) => {
            (StatusCode::CONFLICT, Json(json!({ "error": e.to_string() }))).into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))).into_response(),
    }
}

async fn progress(State(st): State<Arc<AppState>>) -> Response {
    Json(annotation_progress(&st.corpus, &st.store.records())).into_response()
}

async fn aggregate(State(st): State<Arc<AppState>>) -> Response {
    let outcomes = aggregate_annotations(&st.store.records(), st.policy);
    let unresolved: Vec<&String> = outcomes
        .iter()
        .filter(|(_, o)| o.label.is_none())
        .map(|(id, _)| id)
        .collect();
    Json(json!({
        "policy": st.policy.to_string(),
        "images": outcomes,
        "unresolved": unresolved,
    }))
    .into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: &Path) -> Response {
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn image(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match st.corpus.get(&id) {
        Some(r) => send_file(&st.corpus.image_path(r)).await,
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn static_file(State(st): State<Arc<AppState>>, uri: Uri) -> Response {
    let Some(dir) = &st.static_dir else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let rel = Path::new(uri.path().trim_start_matches('/'));
    // only plain names below the asset directory
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let path = if rel.as_os_str().is_empty() { dir.join("index.html") } else { dir.join(rel) };
    send_file(&path).await
}
