use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use ddcs_core::harness::{HarnessError, ScenarioParseError, StateError};

use crate::api::ErrorBody;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Parse(#[from] ScenarioParseError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("no session {0}")]
    NoSession(u64),
    #[error("session limit of {0} reached")]
    TooManySessions(usize),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    fn kind(&self) -> &'static str {
        match self {
            ApiError::BadRequest(_) => "bad-request",
            ApiError::Parse(_) => "scenario-parse",
            ApiError::State(_) => "state",
            ApiError::Harness(_) => "harness",
            ApiError::NoSession(_) => "no-session",
            ApiError::TooManySessions(_) => "too-many-sessions",
            ApiError::Internal(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) | ApiError::Parse(_) | ApiError::State(_) => StatusCode::BAD_REQUEST,
            ApiError::Harness(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::NoSession(_) => StatusCode::NOT_FOUND,
            ApiError::TooManySessions(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            kind: self.kind().to_string(),
            error: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
