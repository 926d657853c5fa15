use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

use searchloop_core::api::{ErrorBody, ErrorDetail};
use searchloop_core::evaluation::EvalError;
use searchloop_core::protocol::ProtocolError;
use searchloop_core::retriever::RetrievalError;
use searchloop_core::supervision::SupervisionError;

/// Error response with a JSON [`ErrorBody`].
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub offset: Option<usize>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), offset: None }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, message = %self.message, "request failed");
        }
        let body = ErrorBody { error: ErrorDetail { code: self.code.to_string(), message: self.message, offset: self.offset } };
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        Self::new(rejection.status(), "invalid_body", rejection.body_text())
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        let (status, code) = match e {
            RetrievalError::InvalidK | RetrievalError::NoQueries | RetrievalError::TooManyQueries { .. } => {
                (StatusCode::BAD_REQUEST, "invalid_retrieval")
            }
            RetrievalError::Transport(_) | RetrievalError::Protocol(_) => (StatusCode::BAD_GATEWAY, "retriever_unavailable"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "retriever_error"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<ProtocolError> for ApiError {
    fn from(e: ProtocolError) -> Self {
        let offset = match e {
            ProtocolError::Parse { offset, .. } => Some(offset),
            _ => None,
        };
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, code: "protocol_error", message: e.to_string(), offset }
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_dataset", e.to_string())
    }
}

impl From<SupervisionError> for ApiError {
    fn from(e: SupervisionError) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "supervision_error", e.to_string())
    }
}
