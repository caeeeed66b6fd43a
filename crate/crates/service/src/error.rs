use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use loopseg_core::pipeline::FieldError;
use serde::Serialize;

/// Error body shared by every endpoint.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                kind: kind.into(),
                message: message.into(),
                fields: Vec::new(),
            },
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "lookup", message)
    }

    pub fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "busy", "an iteration is running")
    }

    pub fn invalid(fields: Vec<FieldError>) -> Self {
        let message = fields
            .iter()
            .map(|f| format!("{}: {}", f.field, f.message))
            .collect::<Vec<_>>()
            .join("; ");
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: ErrorBody {
                kind: "invalid".into(),
                message,
                fields,
            },
        }
    }
}

impl From<loopseg_core::Error> for ApiError {
    fn from(e: loopseg_core::Error) -> Self {
        let status = match e.kind() {
            "lookup" => StatusCode::NOT_FOUND,
            "conflict" => StatusCode::CONFLICT,
            "domain" | "format" | "parse" | "empty_region" | "empty_result" => StatusCode::UNPROCESSABLE_ENTITY,
            "unavailable" => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}
