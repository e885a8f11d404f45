use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use genie_core::GenieError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("no scene loaded")]
    NoScene,
    #[error("another edit is in flight")]
    WriterBusy,
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("corrupt checkpoint: {message}")]
    Corrupt {
        section: Option<String>,
        message: String,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NoScene | ApiError::WriterBusy => StatusCode::CONFLICT,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable(_) | ApiError::Corrupt { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<GenieError> for ApiError {
    fn from(e: GenieError) -> Self {
        match e {
            GenieError::Checkpoint(c) => ApiError::Corrupt {
                section: c.section().map(str::to_string),
                message: c.to_string(),
            },
            GenieError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                ApiError::NotFound(path)
            }
            GenieError::Io { .. } => ApiError::Internal(e.to_string()),
            GenieError::InvalidCamera(_) | GenieError::NonFinite(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Unprocessable(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "version": crate::API_VERSION, "error": self.to_string() });
        match &self {
            ApiError::NotFound(p) => body["path"] = json!(p),
            ApiError::Corrupt { section: Some(s), .. } => body["section"] = json!(s),
            _ => {}
        }
        (self.status(), Json(body)).into_response()
    }
}
