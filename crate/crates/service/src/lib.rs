//! HTTP exploration service.
//!
//! - `GET  /api/space`   parameter space, atlas and training positions
//! - `POST /api/render`  PNG of one engine at θ, with `X-Assemble-Ms` / `X-Render-Ms`
//! - `POST /api/metrics` field PSNR/SSIM of two engines against the reference
//!
//! Anything else is served from an optional static directory.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use hyperinr::config::{ExperimentConfig, Task};
use hyperinr::fields::io::encode_png;
use hyperinr::fields::FieldShape;
use hyperinr::hypernet::{HyperInrModel, ParamDim, ParamSpace};
use hyperinr::pipeline::{field_shape, training_params};
use hyperinr::renderer::{TfPoint, TransferFunction};
use hyperinr::tasks::{metrics_row, render_view, task_shape, Engine, Engines, ShadowChoice, View};
use hyperinr::training::{LerpBaseline, TrainingSet};
use hyperinr::Error;

pub const MAX_IMAGE_SIZE: usize = 1024;
pub const TF_PRESETS: [&str; 3] = ["default", "warm", "dense"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceDescriptor {
    pub task: Task,
    pub params: Vec<ParamDim>,
    /// Native units.
    pub encoder_positions: Vec<Vec<f64>>,
    pub training_positions: Vec<Vec<f64>>,
    pub engines: Vec<Engine>,
    pub transfer_functions: Vec<String>,
    pub default_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitCamera {
    pub polar: f64,
    pub azimuth: f64,
    pub distance: f64,
    pub fov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TfSpec {
    Preset(String),
    Points(Vec<TfPoint>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub theta: Vec<f64>,
    #[serde(default = "default_engine")]
    pub engine: Engine,
    #[serde(default)]
    pub camera: Option<OrbitCamera>,
    #[serde(default)]
    pub tf: Option<TfSpec>,
    #[serde(default)]
    pub shadow: Option<ShadowChoice>,
    #[serde(default)]
    pub size: Option<usize>,
}

fn default_engine() -> Engine {
    Engine::Hyperinr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRequest {
    pub thetas: Vec<Vec<f64>>,
    #[serde(default = "default_pair")]
    pub engines: [Engine; 2],
}

fn default_pair() -> [Engine; 2] {
    [Engine::Hyperinr, Engine::Lerp]
}

/// `psnr` is `null` for identical fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub psnr: Option<f64>,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub theta: Vec<f64>,
    /// Keyed by engine name, each against the reference.
    pub scores: BTreeMap<Engine, Score>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub engines: [Engine; 2],
    pub rows: Vec<MetricsEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            message: message.to_string(),
        }
    }
    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
    fn unprocessable(message: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::OutOfRange { .. } => Self::unprocessable(e),
            Error::Config(_) | Error::Shape { .. } => Self::bad_request(e),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub png: Vec<u8>,
    pub assemble_ms: f64,
    pub render_ms: f64,
}

/// Read-only state shared by all requests.
pub struct ServiceState {
    config: ExperimentConfig,
    space: ParamSpace,
    model: Option<HyperInrModel>,
    baseline: Option<LerpBaseline>,
    training: Vec<Vec<f64>>,
    ui_dir: Option<PathBuf>,
}

impl ServiceState {
    pub fn new(config: ExperimentConfig, model: Option<HyperInrModel>, training: Option<TrainingSet>) -> hyperinr::Result<Self> {
        let space = config.space();
        if let Some(m) = &model {
            if *m.atlas.space() != space {
                return Err(Error::Config("checkpoint parameter space differs from the configuration".into()));
            }
        }
        let (baseline, training) = match training {
            Some(set) => {
                let thetas = set.items.iter().map(|s| s.theta.clone()).collect();
                (Some(LerpBaseline::new(space.clone(), &set.items)?), thetas)
            }
            None => (None, training_params(&config)?),
        };
        Ok(Self {
            config,
            space,
            model,
            baseline,
            training,
            ui_dir: None,
        })
    }

    pub fn with_ui_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.ui_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn engines(&self) -> Engines<'_> {
        Engines {
            task: self.config.task,
            space: &self.space,
            model: self.model.as_ref(),
            baseline: self.baseline.as_ref(),
            settings: self.config.scene.settings,
        }
    }

    pub fn descriptor(&self) -> SpaceDescriptor {
        let encoder_positions = self
            .model
            .as_ref()
            .map(|m| m.atlas.positions().iter().map(|p| self.space.denormalize(p)).collect())
            .unwrap_or_default();
        let mut engines = Vec::new();
        if self.model.is_some() {
            engines.push(Engine::Hyperinr);
        }
        if self.baseline.is_some() {
            engines.push(Engine::Lerp);
        }
        engines.push(Engine::Reference);
        SpaceDescriptor {
            task: self.config.task,
            params: self.space.dims.clone(),
            encoder_positions,
            training_positions: self.training.clone(),
            engines,
            transfer_functions: TF_PRESETS.iter().map(|s| s.to_string()).collect(),
            default_size: self.config.scene.size,
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), ApiError> {
        if theta.len() != self.space.dim() || !self.space.contains(theta) {
            return Err(ApiError::unprocessable(format!(
                "theta {theta:?} outside the {}-dimensional parameter space",
                self.space.dim()
            )));
        }
        Ok(())
    }

    fn check_engine(&self, engine: Engine) -> Result<(), ApiError> {
        let loaded = match engine {
            Engine::Hyperinr => self.model.is_some(),
            Engine::Lerp => self.baseline.is_some(),
            Engine::Reference => true,
        };
        if !loaded {
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("{engine:?} engine not loaded")));
        }
        Ok(())
    }

    fn view(&self, req: &RenderRequest, size: usize) -> Result<View, ApiError> {
        let task = self.config.task;
        let mut scene = self.config.scene.clone();
        if let Some(c) = req.camera {
            scene.camera_polar = c.polar;
            scene.camera_azimuth = c.azimuth;
            scene.camera_distance = c.distance;
            scene.fov = c.fov;
        }
        let mut view = View::from_scene(task, &scene, &req.theta, size)?;
        match &req.tf {
            Some(TfSpec::Preset(name)) => {
                view.tf = TransferFunction::preset(name).ok_or_else(|| ApiError::bad_request(format!("unknown transfer function {name:?}")))?
            }
            Some(TfSpec::Points(points)) => view.tf = TransferFunction::new(points.clone())?,
            None => {}
        }
        if let Some(s) = req.shadow {
            if s == ShadowChoice::Field && task != Task::Dgs {
                return Err(ApiError::bad_request("field shadows only apply to the dgs task"));
            }
            view.shadow = s;
        }
        Ok(view)
    }

    fn render_shape(&self, size: usize) -> FieldShape {
        match self.config.task {
            Task::Nvs => task_shape(Task::Nvs, &[size, size]),
            _ => field_shape(&self.config),
        }
    }

    pub fn render(&self, req: &RenderRequest) -> Result<Rendered, ApiError> {
        self.check_theta(&req.theta)?;
        let size = req.size.unwrap_or(self.config.scene.size);
        if size == 0 || size > MAX_IMAGE_SIZE {
            return Err(ApiError::bad_request(format!("size {size} outside 1..={MAX_IMAGE_SIZE}")));
        }
        self.check_engine(req.engine)?;
        let view = self.view(req, size)?;
        let t0 = Instant::now();
        let out = self.engines().field(req.engine, &req.theta, &self.render_shape(size))?;
        let img = render_view(self.config.task, &out.field, &view)?;
        let total_ms = t0.elapsed().as_secs_f64() * 1e3;
        Ok(Rendered {
            png: encode_png(&img)?,
            assemble_ms: out.assemble_ms,
            render_ms: (total_ms - out.assemble_ms).max(0.0),
        })
    }

    pub fn metrics(&self, req: &MetricsRequest) -> Result<MetricsResponse, ApiError> {
        for t in &req.thetas {
            self.check_theta(t)?;
        }
        if req.engines[0] == req.engines[1] {
            return Err(ApiError::bad_request("metrics need two different engines"));
        }
        for e in req.engines {
            self.check_engine(e)?;
        }
        let engines = self.engines();
        let shape = field_shape(&self.config);
        let rows = req
            .thetas
            .iter()
            .map(|t| {
                let row = metrics_row(&engines, t, &shape, req.engines)?;
                let finite = |v: f64| v.is_finite().then_some(v);
                let mut scores = BTreeMap::new();
                scores.insert(req.engines[0], Score { psnr: finite(row.psnr_hyper), ssim: row.ssim_hyper });
                scores.insert(req.engines[1], Score { psnr: finite(row.psnr_lerp), ssim: row.ssim_lerp });
                Ok(MetricsEntry {
                    theta: t.clone(),
                    scores,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(MetricsResponse {
            engines: req.engines,
            rows,
        })
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?
}

async fn space_handler(State(state): State<Arc<ServiceState>>) -> Json<SpaceDescriptor> {
    Json(state.descriptor())
}

async fn render_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = parse_body(&body)?;
    let out = blocking(move || state.render(&req)).await?;
    let mut resp = out.png.into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    for (name, v) in [("x-assemble-ms", out.assemble_ms), ("x-render-ms", out.render_ms)] {
        headers.insert(name, HeaderValue::from_str(&format!("{v:.3}")).expect("ascii header"));
    }
    Ok(resp)
}

async fn metrics_handler(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<MetricsResponse>, ApiError> {
    let req: MetricsRequest = parse_body(&body)?;
    Ok(Json(blocking(move || state.metrics(&req)).await?))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn static_handler(State(state): State<Arc<ServiceState>>, uri: Uri) -> Response {
    let not_found = || (StatusCode::NOT_FOUND, "not found").into_response();
    let Some(dir) = &state.ui_dir else {
        return not_found();
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return not_found();
    }
    let path = dir.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => not_found(),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/space", get(space_handler))
        .route("/api/render", post(render_handler))
        .route("/api/metrics", post(metrics_handler))
        .fallback(static_handler)
        .with_state(state)
}

pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
