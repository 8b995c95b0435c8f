//! Single-session HTTP endpoint for the annotation UI.
//!
//! Reads run concurrently; every mutation (drawing the next question, applying an
//! answer) holds the write lock and works on a copy of the session that replaces the
//! live one only on success. At most one question is pending at a time.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use partaog::geometry::BBox;
use partaog::model::save_model;
use partaog::qa::{Answer, AnswerRecord, QaSession, Question};
use partaog::Error;
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

struct Inner {
    session: QaSession,
    pending: Option<Question>,
    images: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState(Arc<RwLock<Inner>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSummary {
    pub id: u32,
    pub name: String,
    pub patterns: usize,
    pub annotations: usize,
}

/// Body of `GET /session/state` and of a successful `POST /answer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub semantic_part: String,
    pub budget: usize,
    pub questions_asked: usize,
    pub remaining_budget: usize,
    pub finished: bool,
    pub annotated: Vec<String>,
    pub unannotated: Vec<String>,
    pub absent: Vec<String>,
    pub templates: Vec<TemplateSummary>,
    pub pending: Option<Question>,
    /// `None` while infinite, i.e. before the first model parses the images.
    pub kl_divergence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub mime: String,
    /// Standard base64 of the file bytes.
    pub data: String,
}

/// Body of `GET /question/next`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub image_id: String,
    pub template_id: Option<u32>,
    pub template_name: Option<String>,
    pub bbox: Option<BBox>,
    /// Absent when no image directory was given or no file matches the id.
    pub image: Option<ImagePayload>,
}

impl QuestionView {
    pub fn question(&self) -> Question {
        Question {
            image_id: self.image_id.clone(),
            template_id: self.template_id,
            template_name: self.template_name.clone(),
            bbox: self.bbox,
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

/// Errors from applying a well-formed answer: storage failures are the server's, the
/// rest mean the answer contradicts the session.
fn apply_error(e: Error) -> Response {
    match e {
        Error::Io(_) | Error::Json(_) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        other => error(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
    }
}

fn view(inner: &Inner) -> SessionView {
    let s = &inner.session;
    SessionView {
        semantic_part: s.model().semantic_part.clone(),
        budget: s.config().budget,
        questions_asked: s.questions_asked(),
        remaining_budget: s.remaining_budget(),
        finished: s.is_finished(),
        annotated: s.annotated().iter().cloned().collect(),
        unannotated: s.unannotated().iter().cloned().collect(),
        absent: s.absent().iter().cloned().collect(),
        templates: s
            .model()
            .templates
            .iter()
            .map(|t| TemplateSummary {
                id: t.id,
                name: t.name.clone(),
                patterns: t.patterns.len(),
                annotations: t.annotations.len(),
            })
            .collect(),
        pending: inner.pending.clone(),
        kl_divergence: Some(s.kl_divergence()).filter(|v| v.is_finite()),
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

/// First file in `dir`, by name, whose stem is `image_id`.
fn find_image(dir: &Path, image_id: &str) -> std::io::Result<Option<ImagePayload>> {
    let mut matches: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_stem().is_some_and(|s| s == image_id))
        .collect();
    matches.sort();
    let Some(path) = matches.into_iter().next() else {
        return Ok(None);
    };
    Ok(Some(ImagePayload {
        mime: mime_for(&path).to_string(),
        data: base64::engine::general_purpose::STANDARD.encode(fs::read(&path)?),
    }))
}

async fn session_state(State(app): State<AppState>) -> Json<SessionView> {
    Json(view(&*app.0.read().await))
}

async fn next_question(State(app): State<AppState>) -> Response {
    let mut inner = app.0.write().await;
    let question = match &inner.pending {
        Some(q) => q.clone(),
        None => {
            if inner.session.is_finished() {
                return StatusCode::NO_CONTENT.into_response();
            }
            let mut session = inner.session.clone();
            let drawn = tokio::task::spawn_blocking(move || session.select_question().map(|q| (q, session))).await;
            match drawn {
                Ok(Ok((q, session))) => {
                    inner.session = session;
                    inner.pending = Some(q.clone());
                    q
                }
                Ok(Err(e)) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
                Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
            }
        }
    };
    let image = match &inner.images {
        Some(dir) => match find_image(dir, &question.image_id) {
            Ok(img) => img,
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        },
        None => None,
    };
    Json(QuestionView {
        image_id: question.image_id,
        template_id: question.template_id,
        template_name: question.template_name,
        bbox: question.bbox,
        image,
    })
    .into_response()
}

async fn answer(State(app): State<AppState>, body: Bytes) -> Response {
    let mut inner = app.0.write().await;
    let Some(question) = inner.pending.clone() else {
        return error(StatusCode::CONFLICT, "no question is pending");
    };
    let record: AnswerRecord = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let answer = match Answer::try_from(record) {
        Ok(a) => a,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let mut session = inner.session.clone();
    let applied = tokio::task::spawn_blocking(move || session.apply_answer(&question, &answer).map(|()| session)).await;
    match applied {
        Ok(Ok(session)) => {
            inner.session = session;
            inner.pending = None;
            Json(view(&inner)).into_response()
        }
        Ok(Err(e)) => apply_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn model(State(app): State<AppState>) -> Response {
    let inner = app.0.read().await;
    match save_model(inner.session.model()) {
        Ok(text) => ([(header::CONTENT_TYPE, "application/json")], text).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Routes of the session endpoint. `images` is the directory image bytes are served from.
pub fn router(session: QaSession, images: Option<PathBuf>) -> Router {
    let state = AppState(Arc::new(RwLock::new(Inner {
        session,
        pending: None,
        images,
    })));
    Router::new()
        .route("/session/state", get(session_state))
        .route("/question/next", get(next_question))
        .route("/answer", post(answer))
        .route("/model", get(model))
        .with_state(state)
}
