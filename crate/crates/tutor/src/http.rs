use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mlq_core::bank::Topic;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::TutorError;
use crate::service::{Event, Reply, Tutor};
use crate::session::Answer;

impl IntoResponse for TutorError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).expect("valid status");
        (status, Json(self.body())).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateBody {
    pub topic: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerBody {
    pub value: Option<f64>,
    pub option: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveBody {
    pub question: String,
    #[serde(default)]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct Health {
    status: &'static str,
    model_loaded: bool,
    templates: usize,
    sessions: usize,
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, TutorError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(TutorError::InvalidRequest("empty body".into()));
    }
    serde_json::from_slice(body).map_err(|e| TutorError::InvalidRequest(e.to_string()))
}

type Shared = State<Arc<Tutor>>;

async fn healthz(State(t): Shared) -> Json<Health> {
    Json(Health {
        status: "ok",
        model_loaded: t.solver.is_some(),
        templates: t.bank.templates.len(),
        sessions: t.session_count(),
    })
}

async fn create(State(t): Shared, body: Bytes) -> Result<Response, TutorError> {
    let body: CreateBody = if body.iter().all(u8::is_ascii_whitespace) {
        CreateBody::default()
    } else {
        parse(&body)?
    };
    let topic = match body.topic.as_deref() {
        None => None,
        Some(name) => Some(
            name.parse::<Topic>()
                .map_err(|e| TutorError::UnknownTopic(e.0))?,
        ),
    };
    let summary = t.create_session(topic, body.seed)?;
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn summary(State(t): Shared, Path(id): Path<String>) -> Result<Response, TutorError> {
    Ok(Json(t.summary(&id)?).into_response())
}

fn reply(r: Result<Reply, TutorError>) -> Result<Response, TutorError> {
    Ok(Json(r?).into_response())
}

async fn question(State(t): Shared, Path(id): Path<String>) -> Result<Response, TutorError> {
    reply(t.handle(Event::Question { session: id }))
}

async fn answer(
    State(t): Shared,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, TutorError> {
    let body: AnswerBody = parse(&body)?;
    let answer = match (body.value, body.option) {
        (Some(v), None) => Answer::Value(v),
        (None, Some(i)) => Answer::Option(i),
        _ => {
            return Err(TutorError::InvalidRequest(
                "give exactly one of `value` or `option`".into(),
            ))
        }
    };
    reply(t.handle(Event::Answer {
        session: id,
        answer,
    }))
}

async fn hint(State(t): Shared, Path(id): Path<String>) -> Result<Response, TutorError> {
    match t.handle(Event::Hint {
        session: id.clone(),
    }) {
        Err(TutorError::Hint(mlq_core::hints::HintError::ExhaustedHints)) => {
            let e = TutorError::Hint(mlq_core::hints::HintError::ExhaustedHints);
            let mut body = e.body();
            body.message = format!("{}: POST /sessions/{id}/reveal", body.message);
            Ok((StatusCode::CONFLICT, Json(body)).into_response())
        }
        r => reply(r),
    }
}

async fn reveal(State(t): Shared, Path(id): Path<String>) -> Result<Response, TutorError> {
    reply(t.handle(Event::Reveal { session: id }))
}

async fn solve(State(t): Shared, body: Bytes) -> Result<Response, TutorError> {
    let body: SolveBody = parse(&body)?;
    let summary =
        tokio::task::spawn_blocking(move || t.solve(&body.question, body.samples, body.seed))
            .await
            .expect("solver task does not panic")?;
    Ok(Json(summary).into_response())
}

async fn not_found() -> TutorError {
    TutorError::InvalidRequest("no such endpoint".into())
}

pub fn router(tutor: Arc<Tutor>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(summary))
        .route("/sessions/{id}/question", get(question))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/hint", post(hint))
        .route("/sessions/{id}/reveal", post(reveal))
        .route("/solve", post(solve))
        .fallback(not_found)
        .with_state(tutor)
}
