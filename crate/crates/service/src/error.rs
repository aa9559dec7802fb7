use std::collections::BTreeMap;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

/// Wire error: `{"error": code, "message": text}` plus optional detail.
#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<TargetName>>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct TargetName {
    pub id: usize,
    pub name: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, error: code.into(), message: message.into(), vocabulary: None }
    }

    pub fn bad_request(message: String) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn bad_image(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_image", message)
    }

    pub fn limit(message: String) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "limit_exceeded", message)
    }

    pub fn unprocessable(code: &str, message: String) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn conflict(code: &str, message: String) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id:?}"))
    }

    pub fn busy(id: &str) -> Self {
        Self::new(StatusCode::CONFLICT, "busy", format!("session {id:?} is handling another request"))
    }

    pub fn unknown_target(target: usize, names: &BTreeMap<usize, String>) -> Self {
        let mut e = Self::new(StatusCode::NOT_FOUND, "unknown_target", format!("target {target} is not in the model vocabulary"));
        e.vocabulary = Some(names.iter().map(|(&id, n)| TargetName { id, name: n.clone() }).collect());
        e
    }
}

impl From<verse_core::Error> for ApiError {
    fn from(e: verse_core::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.error, self.message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}
