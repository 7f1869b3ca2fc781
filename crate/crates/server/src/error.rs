use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use flowcube_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),

    #[error("{0}")]
    Unprocessable(String),

    #[error("result would hold about {estimate} elements, above the hard cap of {cap}")]
    TooLarge { estimate: usize, cap: usize },

    #[error("{0}")]
    NotFound(String),

    #[error("no snapshot loaded")]
    Unavailable,

    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::LevelOutOfRange { .. } => ApiError::Unprocessable(e.to_string()),
            CoreError::NotFound(_) => ApiError::NotFound(e.to_string()),
            CoreError::InvalidArgument(_) | CoreError::InvalidRegion(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "v": crate::API_VERSION, "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
