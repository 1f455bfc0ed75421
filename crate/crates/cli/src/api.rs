//! Response schema shared by `spiralscreen predict` and `POST /api/v1/predict`.
//!
//! Both paths call [`predict_body`], so for the same images and bundles they
//! return the same bytes.

use std::collections::BTreeMap;

use serde::Serialize;
use spiralscreen::inference::{fuse, Manifest, ModelBundle, Prediction};
use spiralscreen::{DrawingType, Error as CoreError};

pub const MAX_IMAGE_BYTES: usize = 5 * 1024 * 1024;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";
const JPEG_MAGIC: &[u8] = b"\xff\xd8\xff";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassProbabilities {
    pub healthy: f64,
    pub parkinson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictResponse {
    pub label: String,
    pub confidence: f64,
    pub winning_source: String,
    pub per_model: BTreeMap<String, ClassProbabilities>,
    pub model_versions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn body(&self) -> Vec<u8> {
        let value = serde_json::json!({ "error": { "code": self.code, "message": self.message } });
        let mut out = serde_json::to_vec(&value).expect("json value serializes");
        out.push(b'\n');
        out
    }
}

/// Loaded bundles, one per drawing type. Shared read-only.
#[derive(Debug, Default)]
pub struct Models {
    pub spiral: Option<ModelBundle>,
    pub wave: Option<ModelBundle>,
}

impl Models {
    pub fn get(&self, t: DrawingType) -> Option<&ModelBundle> {
        match t {
            DrawingType::Spiral => self.spiral.as_ref(),
            DrawingType::Wave => self.wave.as_ref(),
        }
    }

    /// Check each bundle sits in the slot matching its manifest.
    pub fn validate(&self) -> Result<(), String> {
        for t in DrawingType::ALL {
            if let Some(b) = self.get(t) {
                if b.manifest().drawing_type != t {
                    return Err(format!(
                        "bundle given for {t} was trained on {} drawings",
                        b.manifest().drawing_type
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn versions(&self) -> BTreeMap<String, String> {
        DrawingType::ALL
            .into_iter()
            .filter_map(|t| self.get(t).map(|b| (t.to_string(), b.model_version().to_string())))
            .collect()
    }

    pub fn manifests(&self) -> BTreeMap<String, Manifest> {
        DrawingType::ALL
            .into_iter()
            .filter_map(|t| self.get(t).map(|b| (t.to_string(), b.manifest().clone())))
            .collect()
    }
}

/// Reject oversized or non-PNG/JPEG uploads before decoding.
pub fn check_upload(field: &str, bytes: &[u8]) -> Result<(), ApiError> {
    if bytes.len() > MAX_IMAGE_BYTES {
        return Err(ApiError::new(
            413,
            "image_too_large",
            format!("{field} image is {} bytes, limit is {MAX_IMAGE_BYTES}", bytes.len()),
        ));
    }
    if bytes.is_empty() {
        return Err(ApiError::new(400, "empty_image", format!("{field} image is empty")));
    }
    if !(bytes.starts_with(PNG_MAGIC) || bytes.starts_with(JPEG_MAGIC)) {
        return Err(ApiError::new(
            415,
            "unsupported_media_type",
            format!("{field} image must be PNG or JPEG"),
        ));
    }
    Ok(())
}

fn predict_one(models: &Models, t: DrawingType, bytes: &[u8]) -> Result<Prediction, ApiError> {
    check_upload(t.as_str(), bytes)?;
    let bundle = models
        .get(t)
        .ok_or_else(|| ApiError::new(503, "model_unavailable", format!("no {t} model is loaded")))?;
    bundle.predict(bytes).map_err(|e| match e {
        CoreError::Input(msg) => ApiError::new(400, "invalid_image", format!("{t}: {msg}")),
        other => ApiError::new(500, "inference_failed", format!("{t}: {other}")),
    })
}

pub fn predict_response(
    models: &Models,
    spiral: Option<&[u8]>,
    wave: Option<&[u8]>,
) -> Result<PredictResponse, ApiError> {
    if spiral.is_none() && wave.is_none() {
        return Err(ApiError::new(
            400,
            "missing_images",
            "provide a `spiral` and/or `wave` image",
        ));
    }
    let s = spiral.map(|b| predict_one(models, DrawingType::Spiral, b)).transpose()?;
    let w = wave.map(|b| predict_one(models, DrawingType::Wave, b)).transpose()?;
    let fused = fuse(s.as_ref(), w.as_ref()).map_err(|e| ApiError::new(400, "missing_images", e.to_string()))?;

    let mut per_model = BTreeMap::new();
    let mut model_versions = BTreeMap::new();
    for p in s.iter().chain(w.iter()) {
        let t = p.drawing_type;
        per_model.insert(
            t.to_string(),
            ClassProbabilities {
                healthy: p.p_healthy,
                parkinson: p.p_parkinson,
            },
        );
        if let Some(b) = models.get(t) {
            model_versions.insert(t.to_string(), b.model_version().to_string());
        }
    }
    Ok(PredictResponse {
        label: fused.label.to_string(),
        confidence: fused.confidence,
        winning_source: fused.winning_source.to_string(),
        per_model,
        model_versions,
    })
}

/// Serialized response body: compact JSON plus a trailing newline.
pub fn predict_body(models: &Models, spiral: Option<&[u8]>, wave: Option<&[u8]>) -> Result<Vec<u8>, ApiError> {
    let resp = predict_response(models, spiral, wave)?;
    let mut out = serde_json::to_vec(&resp).map_err(|e| ApiError::new(500, "internal", e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}
