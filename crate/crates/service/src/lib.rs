//! HTTP inference service over a loaded checkpoint.
//!
//! Endpoints:
//! - `POST /generate`: [`GenerateRequest`] to one base64 PNG.
//! - `POST /interpolate`: [`InterpolateRequest`] to a sequence of base64 PNGs.
//! - `GET /model-info`: architecture, latent sizes, categories, pose limits and
//!   training metadata.
//! - `GET /health`
//!
//! Parameters are shared read-only between requests; rendering runs on the
//! blocking pool.

pub mod request;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use blockgan::checkpoint::{load_checkpoint, Checkpoint};
use blockgan::dataset::encode_png;
use blockgan::model::{render_spec, ModelConfig, BACKGROUND};
use blockgan::params::ParamStore;
use blockgan::pose::PoseRanges;
use serde::Serialize;
use serde_json::{json, Value};

pub use request::{FieldError, GenerateRequest, InterpolateRequest};
use request::{MAX_ELEVATION_DEG, MAX_INTERPOLATION_STEPS, MAX_OBJECTS};

/// Immutable model state shared by all requests.
pub struct AppState {
    pub model: ModelConfig,
    pub params: ParamStore,
    info: Value,
}

impl AppState {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let m = &ckpt.meta;
        let model = m.model.clone();
        let latent_dims: serde_json::Map<String, Value> = std::iter::once(&model.background)
            .chain(&model.foreground)
            .map(|c| (c.name.clone(), json!(c.z_dim)))
            .collect();
        let training_poses: Option<&PoseRanges> = m.train.as_ref().map(|t| &t.pose);
        let info = json!({
            "model": model,
            "image_size": model.image_size,
            "categories": model.foreground.iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
            "background": BACKGROUND,
            "latent_dims": latent_dims,
            "num_foreground": model.num_foreground,
            "composer": model.composer,
            "limits": {
                "scale": [0.0, 1.0],
                "translation": [-model.scene_extent, model.scene_extent],
                "camera_elevation_deg": [-MAX_ELEVATION_DEG, MAX_ELEVATION_DEG],
                "max_objects": MAX_OBJECTS,
                "max_interpolation_steps": MAX_INTERPOLATION_STEPS,
            },
            "pose_ranges": training_poses,
            "training": {
                "step": m.step,
                "d_updates": m.d_updates,
                "g_updates": m.g_updates,
                "config": m.train,
                "dataset": m.dataset,
            },
        });
        AppState {
            model,
            params: ckpt.gen,
            info,
        }
    }

    pub fn model_info(&self) -> &Value {
        &self.info
    }
}

#[derive(Debug, Serialize)]
struct Timing {
    render_ms: f64,
    encode_ms: f64,
    total_ms: f64,
}

#[derive(Debug, Serialize)]
struct GenerateResponse {
    encoding: &'static str,
    width: usize,
    height: usize,
    image: String,
    timing: Timing,
}

#[derive(Debug, Serialize)]
struct InterpolateResponse {
    encoding: &'static str,
    width: usize,
    height: usize,
    images: Vec<String>,
    timing: Timing,
}

/// Error responses: field-level for bad requests, an id to grep the log for
/// internal failures.
#[derive(Debug)]
pub enum ApiError {
    BadRequest(Vec<FieldError>),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::BadRequest(errors) => (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": "invalid request", "fields": errors })),
            )
                .into_response(),
            ApiError::Internal(detail) => {
                let id = uuid::Uuid::new_v4().to_string();
                log::error!("request failed [{id}]: {detail}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    Json(json!({ "error": "generation failed", "diagnostic_id": id })),
                )
                    .into_response()
            }
        }
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|r| {
        ApiError::BadRequest(vec![FieldError {
            field: "body".into(),
            message: r.body_text(),
        }])
    })
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Render and encode scenes on the blocking pool.
async fn render_all(state: Arc<AppState>, specs: Vec<blockgan::model::SceneSpec>) -> Result<(Vec<String>, f64, f64), ApiError> {
    tokio::task::spawn_blocking(move || {
        let t = Instant::now();
        let images = specs
            .iter()
            .map(|s| render_spec(&state.params, &state.model, s))
            .collect::<blockgan::Result<Vec<_>>>()
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let render = ms(t);
        let t = Instant::now();
        let engine = base64::engine::general_purpose::STANDARD;
        let encoded = images
            .iter()
            .map(|img| encode_png(img).map(|png| engine.encode(png)))
            .collect::<blockgan::Result<Vec<_>>>()
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok((encoded, render, ms(t)))
    })
    .await
    .map_err(|e| ApiError::Internal(format!("render task: {e}")))?
}

async fn generate(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<GenerateRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let start = Instant::now();
    let req = body(payload)?;
    let errors = req.validate(&state.model);
    if !errors.is_empty() {
        return Err(ApiError::BadRequest(errors));
    }
    let size = state.model.image_size;
    let (mut images, render_ms, encode_ms) = render_all(state, vec![req.to_spec()]).await?;
    let resp = GenerateResponse {
        encoding: "png",
        width: size,
        height: size,
        image: images.remove(0),
        timing: Timing {
            render_ms,
            encode_ms,
            total_ms: ms(start),
        },
    };
    Ok(Json(serde_json::to_value(resp).expect("serializable")))
}

async fn interpolate(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<InterpolateRequest>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let start = Instant::now();
    let req = body(payload)?;
    let errors = req.validate(&state.model);
    if !errors.is_empty() {
        return Err(ApiError::BadRequest(errors));
    }
    let frames = req.frames(&state.model).map_err(|e| ApiError::Internal(e.to_string()))?;
    let size = state.model.image_size;
    let (images, render_ms, encode_ms) = render_all(state, frames).await?;
    let resp = InterpolateResponse {
        encoding: "png",
        width: size,
        height: size,
        images,
        timing: Timing {
            render_ms,
            encode_ms,
            total_ms: ms(start),
        },
    };
    Ok(Json(serde_json::to_value(resp).expect("serializable")))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(state.info.clone())
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/interpolate", post(interpolate))
        .route("/model-info", get(model_info))
        .route("/health", get(health))
        .with_state(state)
}

/// Load `checkpoint` and serve until interrupted.
pub async fn serve(checkpoint: &Path, bind: SocketAddr) -> Result<(), Box<dyn std::error::Error>> {
    let state = Arc::new(AppState::from_checkpoint(load_checkpoint(checkpoint)?));
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("serving {} on http://{}", checkpoint.display(), listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await?;
    Ok(())
}
