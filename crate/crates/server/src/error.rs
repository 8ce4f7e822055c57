use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use aba_core::analytics::AnalyticsError;
use aba_core::session::SessionError;

/// Every failure leaves the server as `{code, message, request_id}`.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub request_id: String,
}

#[derive(Serialize)]
struct Body<'a> {
    code: &'a str,
    message: &'a str,
    request_id: &'a str,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>, request_id: &str) -> Self {
        ApiError { status, code, message: message.into(), request_id: request_id.to_owned() }
    }

    pub fn bad_request(message: impl Into<String>, request_id: &str) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message, request_id)
    }

    pub fn session(e: SessionError, request_id: &str) -> Self {
        let status = match &e {
            SessionError::InvalidCredential => StatusCode::UNAUTHORIZED,
            SessionError::UnknownSession(_) | SessionError::UnknownTrial(_) => StatusCode::NOT_FOUND,
            SessionError::Domain(_) | SessionError::InvalidSelection { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Storage(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::CONFLICT,
        };
        Self::new(status, e.code(), e.to_string(), request_id)
    }

    pub fn analytics(e: AnalyticsError, request_id: &str) -> Self {
        let status = match e {
            AnalyticsError::BadWindow => StatusCode::BAD_REQUEST,
            AnalyticsError::NoData | AnalyticsError::NotCompleted => StatusCode::NOT_FOUND,
        };
        Self::new(status, e.code(), e.to_string(), request_id)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body { code: self.code, message: &self.message, request_id: &self.request_id };
        (self.status, Json(body)).into_response()
    }
}
