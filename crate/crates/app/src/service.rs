//! HTTP service under `/v1`.
//!
//! | route            | method | body |
//! |------------------|--------|------|
//! | `/v1/health`     | GET    | `{status, version}` |
//! | `/v1/config`     | GET    | effective engine configuration |
//! | `/v1/matte`      | POST   | [`MatteBody`] → [`MatteReply`] |

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use genmatte_core::guidance::ScribbleDoc;
use genmatte_core::PatchBox;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::engine::{Engine, GuideInput, Job};
use crate::error::AppError;
use crate::io::{load_gray_bytes, load_image_bytes};

/// Request payload of `POST /v1/matte`. At most one of `trimap`, `mask` and
/// `scribbles` may be present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatteBody {
    /// Base64 PNG/PGM/PPM bytes.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trimap: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scribbles: Option<ScribbleDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr: Option<bool>,
    #[serde(default)]
    pub diagnostics: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatteReply {
    /// Base64 16-bit gray PNG.
    pub alpha: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<PatchBox>>,
    pub latent_f: usize,
    pub timing_ms: u64,
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        let status = match e {
            AppError::Usage(_) | AppError::Input(_) => StatusCode::BAD_REQUEST,
            AppError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AppError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status == StatusCode::INTERNAL_SERVER_ERROR {
            let id = uuid::Uuid::new_v4();
            eprintln!("request {id} failed: {}", self.message);
            return (
                self.status,
                Json(json!({ "error": "internal error", "id": id.to_string() })),
            )
                .into_response();
        }
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn b64(field: &str, s: &str) -> Result<Vec<u8>, AppError> {
    B64.decode(s.trim())
        .map_err(|e| AppError::Usage(format!("{field} is not valid base64: {e}")))
}

impl MatteBody {
    pub fn into_job(self) -> Result<(Job, bool), AppError> {
        let kinds = [self.trimap.is_some(), self.mask.is_some(), self.scribbles.is_some()];
        if kinds.iter().filter(|k| **k).count() > 1 {
            return Err(AppError::Usage(
                "trimap, mask and scribbles are mutually exclusive".into(),
            ));
        }
        let image = load_image_bytes(&b64("image", &self.image)?)?;
        let guide = if let Some(t) = &self.trimap {
            Some(GuideInput::Trimap(load_gray_bytes(&b64("trimap", t)?)?))
        } else if let Some(m) = &self.mask {
            Some(GuideInput::Mask(load_gray_bytes(&b64("mask", m)?)?))
        } else {
            self.scribbles.map(GuideInput::Scribbles)
        };
        let job = Job {
            image,
            guide,
            prompt: self.prompt,
            seed: self.seed.unwrap_or(0),
            hr: self.hr,
        };
        Ok((job, self.diagnostics))
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn config(State(engine): State<Arc<Engine>>) -> Json<serde_json::Value> {
    Json(serde_json::to_value(engine.config()).unwrap_or_default())
}

async fn matte(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<Json<MatteReply>, ApiError> {
    let body: MatteBody =
        serde_json::from_slice(&body).map_err(|e| AppError::Usage(format!("malformed request: {e}")))?;
    let (job, diagnostics) = body.into_job()?;
    let result = tokio::task::spawn_blocking(move || engine.run(&job))
        .await
        .map_err(|e| AppError::Internal(format!("worker failed: {e}")))??;
    Ok(Json(MatteReply {
        alpha: B64.encode(&result.alpha_png),
        uncertainty: if diagnostics {
            result.uncertainty_png.as_ref().map(|b| B64.encode(b))
        } else {
            None
        },
        boxes: diagnostics.then(|| result.plan.boxes.clone()),
        latent_f: result.plan.f,
        timing_ms: result.elapsed_ms,
    }))
}

pub fn router(engine: Arc<Engine>) -> Router {
    let limit = engine.config().service.max_body_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/config", get(config))
        .route("/v1/matte", post(matte))
        .layer(DefaultBodyLimit::max(limit))
        .layer(CorsLayer::permissive())
        .with_state(engine)
}

pub async fn serve(engine: Arc<Engine>, bind: &str) -> Result<(), AppError> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| AppError::Invalid(format!("cannot bind {bind}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| AppError::Internal(e.to_string()))?;
    eprintln!("listening on http://{addr}");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| AppError::Internal(format!("server failed: {e}")))
}
