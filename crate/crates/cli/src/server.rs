//! HTTP service over loaded bundles.
//!
//! * `POST /api/v1/predict`: multipart form with optional `spiral` and
//!   `wave` file fields.
//! * `GET /api/v1/health`: `{"status":"ok","models":{"spiral":..,"wave":..}}`.
//! * `GET /api/v1/models`: manifests of the loaded bundles.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::api::{predict_body, ApiError, Models, MAX_IMAGE_BYTES};

/// Allowed browser origins. Empty means any origin.
#[derive(Clone, Debug, Default)]
pub struct CorsConfig {
    pub origins: Vec<String>,
}

impl CorsConfig {
    fn layer(&self) -> Result<CorsLayer, String> {
        let layer = CorsLayer::new()
            .allow_methods([Method::GET, Method::POST])
            .allow_headers(Any);
        if self.origins.is_empty() || self.origins.iter().any(|o| o == "*") {
            return Ok(layer.allow_origin(Any));
        }
        let origins = self
            .origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| format!("invalid CORS origin `{o}`")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(layer.allow_origin(AllowOrigin::list(origins)))
    }
}

fn json_response(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], Body::from(body)).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json_response(status, self.body())
    }
}

async fn read_form(mut form: Multipart) -> Result<(Option<Bytes>, Option<Bytes>), ApiError> {
    let (mut spiral, mut wave) = (None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::new(400, "invalid_multipart", e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let slot = match name.as_str() {
            "spiral" => &mut spiral,
            "wave" => &mut wave,
            _ => continue,
        };
        if slot.is_some() {
            return Err(ApiError::new(400, "duplicate_field", format!("field `{name}` given twice")));
        }
        let data = field.bytes().await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                ApiError::new(413, "image_too_large", "upload exceeds the request limit".to_string())
            } else {
                ApiError::new(400, "invalid_multipart", e.to_string())
            }
        })?;
        if data.len() > MAX_IMAGE_BYTES {
            return Err(ApiError::new(
                413,
                "image_too_large",
                format!("{name} image is {} bytes, limit is {MAX_IMAGE_BYTES}", data.len()),
            ));
        }
        *slot = Some(data);
    }
    Ok((spiral, wave))
}

async fn predict(State(models): State<Arc<Models>>, form: Multipart) -> Result<Response, ApiError> {
    let (spiral, wave) = read_form(form).await?;
    let body = tokio::task::spawn_blocking(move || predict_body(&models, spiral.as_deref(), wave.as_deref()))
        .await
        .map_err(|e| ApiError::new(500, "internal", e.to_string()))??;
    Ok(json_response(StatusCode::OK, body))
}

async fn health(State(models): State<Arc<Models>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "models": models.versions() }))
}

async fn list_models(State(models): State<Arc<Models>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "models": models.manifests() }))
}

pub fn router(models: Arc<Models>, cors: &CorsConfig) -> Result<Router, String> {
    Ok(Router::new()
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/health", get(health))
        .route("/api/v1/models", get(list_models))
        // two images plus multipart framing
        .layer(DefaultBodyLimit::max(2 * MAX_IMAGE_BYTES + 64 * 1024))
        .layer(cors.layer()?)
        .with_state(models))
}
