//! JSON inference service over a trained Dynamic-Net.
//!
//! The session is immutable after startup; every request runs its own
//! forward pass on a blocking worker.
//!
//! | method | path          | body / query                                 |
//! |--------|---------------|----------------------------------------------|
//! | GET    | `/api/model`  |                                              |
//! | POST   | `/api/infer`  | `{"image_id": "...", "alpha": [a0, a1, a2]}` |
//! | GET    | `/api/sweep`  | `?image_id=...&steps=N[&lo=..&hi=..]`        |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use dynanet::data::to_rgb_bytes;
use dynanet::dynet::{AlphaVector, DynamicNet};
use dynanet::objectives::Objective;
use dynanet::pipeline::Setup;
use dynanet::sweep::{score_output, sweep_uniform, Sample};
use dynanet::tensor::Tensor;

pub const DEFAULT_PORT: u16 = 8787;
/// Largest |α| accepted by `/api/infer` and `/api/sweep`.
pub const ALPHA_BOUND: f64 = 4.0;
pub const SWEEP_RANGE: (f64, f64) = (-1.0, 2.0);
pub const SWEEP_STEPS: (usize, usize) = (2, 101);
const DEFAULT_SWEEP_STEPS: usize = 31;

/// A loaded model with its validation images and loss targets.
pub struct SessionState {
    net: DynamicNet,
    setup: Setup,
}

impl SessionState {
    pub fn new(net: DynamicNet, setup: Setup) -> dynanet::Result<Self> {
        if net.spec() != &setup.spec {
            return Err(dynanet::Error::Config("model architecture does not match the task".into()));
        }
        Ok(SessionState { net, setup })
    }

    pub fn net(&self) -> &DynamicNet {
        &self.net
    }

    pub fn setup(&self) -> &Setup {
        &self.setup
    }

    fn sample(&self, id: &str) -> Result<&Sample, ApiError> {
        self.setup
            .validation
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image id `{id}`")))
    }

    pub fn describe(&self) -> ModelInfo {
        let size = self.setup.validation.first().map_or(0, |s| s.image.shape()[s.image.rank() - 1]);
        ModelInfo {
            blocks: self.net.blocks(),
            image_size: size,
            image_ids: self.setup.validation.iter().map(|s| s.id.clone()).collect(),
            task: self.setup.config.task.name().into(),
            objective0: weights(&self.setup.objective0),
            objective1: weights(&self.setup.objective1),
            eval_lambda: self.setup.probe.lambda,
            alpha_bound: ALPHA_BOUND,
            sweep_range: [SWEEP_RANGE.0, SWEEP_RANGE.1],
        }
    }

    pub fn infer(&self, req: &InferRequest) -> Result<InferResponse, ApiError> {
        let sample = self.sample(&req.image_id)?;
        if req.alpha.len() != self.net.blocks() {
            return Err(ApiError::bad(format!(
                "alpha has {} entries, model has {} insertion points",
                req.alpha.len(),
                self.net.blocks()
            )));
        }
        check_alpha(&req.alpha)?;
        let alpha = AlphaVector::new(req.alpha.clone()).map_err(|e| ApiError::bad(e.to_string()))?;
        let out = self.net.forward(&sample.image, &alpha).map_err(ApiError::internal)?;
        let rec = score_output(&out, sample, &alpha, &self.setup.probe, &self.setup.context()).map_err(ApiError::internal)?;
        let (width, height, rgb) = display_rgb(&out).map_err(ApiError::internal)?;
        Ok(InferResponse {
            width,
            height,
            rgb_base64: BASE64.encode(rgb),
            content_loss: rec.content_loss,
            style_loss: rec.style_loss,
        })
    }

    pub fn sweep(&self, q: &SweepQuery) -> Result<Vec<SweepPoint>, ApiError> {
        let sample = self.sample(&q.image_id)?;
        let steps = q.steps.unwrap_or(DEFAULT_SWEEP_STEPS);
        if !(SWEEP_STEPS.0..=SWEEP_STEPS.1).contains(&steps) {
            return Err(ApiError::bad(format!("steps must lie in [{}, {}], got {steps}", SWEEP_STEPS.0, SWEEP_STEPS.1)));
        }
        let (lo, hi) = (q.lo.unwrap_or(SWEEP_RANGE.0), q.hi.unwrap_or(SWEEP_RANGE.1));
        check_alpha(&[lo, hi])?;
        if lo >= hi {
            return Err(ApiError::bad(format!("empty sweep range [{lo}, {hi}]")));
        }
        let alphas = sweep_alphas(lo, hi, steps);
        let records = sweep_uniform(&self.net, std::slice::from_ref(sample), &alphas, &self.setup.probe, &self.setup.context(), 1)
            .map_err(ApiError::internal)?;
        Ok(records
            .into_iter()
            .map(|r| SweepPoint { alpha: r.alpha[0], content_loss: r.content_loss, style_loss: r.style_loss })
            .collect())
    }
}

/// `steps` evenly spaced values from `lo` to `hi`, both included.
pub fn sweep_alphas(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|i| if i + 1 == steps { hi } else { lo + (hi - lo) * i as f64 / (steps - 1) as f64 })
        .collect()
}

fn check_alpha(values: &[f64]) -> Result<(), ApiError> {
    match values.iter().find(|a| !a.is_finite() || a.abs() > ALPHA_BOUND) {
        Some(a) => Err(ApiError::bad(format!("alpha values must be finite with |α| ≤ {ALPHA_BOUND}, got {a}"))),
        None => Ok(()),
    }
}

/// 8-bit RGB bytes of a network output; single-channel outputs are shown
/// as grey.
pub fn display_rgb(out: &Tensor) -> dynanet::Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = out.chw()?;
    let rgb = if c == 1 {
        let grey = Tensor::new(vec![3, h, w], out.data().repeat(3))?;
        to_rgb_bytes(&grey)?
    } else {
        to_rgb_bytes(out)?
    };
    Ok((w, h, rgb))
}

fn weights(o: &Objective) -> Vec<TermWeight> {
    o.terms().iter().map(|t| TermWeight { term: t.kind.label(), weight: t.weight }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeight {
    pub term: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub blocks: usize,
    pub image_size: usize,
    pub image_ids: Vec<String>,
    pub task: String,
    pub objective0: Vec<TermWeight>,
    pub objective1: Vec<TermWeight>,
    pub eval_lambda: f64,
    pub alpha_bound: f64,
    pub sweep_range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    pub image_id: String,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub width: usize,
    pub height: usize,
    pub rgb_base64: String,
    pub content_loss: f64,
    pub style_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepQuery {
    pub image_id: String,
    pub steps: Option<usize>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub content_loss: f64,
    pub style_loss: f64,
}

/// An error status with a JSON `{"error": message}` body.
#[derive(Clone, Debug, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type Shared = Arc<SessionState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn model(State(s): State<Shared>) -> Json<ModelInfo> {
    Json(s.describe())
}

async fn infer(State(s): State<Shared>, body: Bytes) -> Result<Json<InferResponse>, ApiError> {
    let req: InferRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad(format!("invalid request body: {e}")))?;
    blocking(move || s.infer(&req)).await.map(Json)
}

async fn sweep(State(s): State<Shared>, query: Result<Query<SweepQuery>, axum::extract::rejection::QueryRejection>) -> Result<Json<Vec<SweepPoint>>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad(e.body_text()))?;
    blocking(move || s.sweep(&q)).await.map(Json)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(state: Shared) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/api/model", get(model))
        .route("/api/infer", post(infer))
        .route("/api/sweep", get(sweep))
        .fallback(not_found)
        .layer(cors)
        .with_state(state)
}

/// Serves until the process is stopped. `ready` receives the bound address.
pub async fn serve(state: Arc<SessionState>, addr: SocketAddr, ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    ready(listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
