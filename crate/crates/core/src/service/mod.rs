//! HTTP inference service: upload an image, send clicks and text, get a mask.
//!
//! Routes:
//! - `POST /v1/images` raw PNG/JPEG bytes, answers `{image_id, width, height}`
//! - `POST /v1/segment` `{image_id, clicks, text?, session_id?, saliency_preview?}`
//! - `GET /v1/health` readiness plus the checkpoint manifest
//! - `GET /v1/sessions/{id}` interaction history of a session
//! - `/ui` static files of the annotation front end, when configured
//!
//! Inference runs one request at a time in arrival order; everything else is
//! concurrent. Responses depend only on the checkpoint, image bytes, clicks
//! and text.

mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;
use tower_http::timeout::TimeoutLayer;

use crate::data::{Click, DataError, ImageSample, InteractionSet, LoadedImage};
use crate::dataset::SaliencySource;
use crate::model::{Checkpoint, PredictError, TrainingManifest};
use crate::saliency::SaliencyMap;

pub use session::{HistoryEntry, Session};

pub const DEFAULT_MAX_UPLOAD: usize = 16 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Upload size limit in bytes.
    pub max_upload_bytes: usize,
    pub request_timeout: Duration,
    /// Saliency cache directory, used by whoever builds the [`SaliencySource`].
    pub cache_dir: Option<PathBuf>,
    /// Directory served under `/ui`.
    pub ui_dir: Option<PathBuf>,
    /// Longest side of the returned saliency preview grid.
    pub preview_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
            request_timeout: Duration::from_secs(30),
            cache_dir: None,
            ui_dir: None,
            preview_size: 64,
        }
    }
}

impl ServiceConfig {
    /// `CLICKSEG_PORT` and `CLICKSEG_CACHE_DIR` override the port and cache directory.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(port) = std::env::var("CLICKSEG_PORT").ok().and_then(|p| p.parse().ok()) {
            self.port = port;
        }
        if let Ok(dir) = std::env::var("CLICKSEG_CACHE_DIR") {
            self.cache_dir = Some(dir.into());
        }
        self
    }
}

/// The loaded model and its saliency backend.
pub struct Engine {
    pub checkpoint: Checkpoint,
    pub saliency: Option<SaliencySource>,
}

enum ModelState {
    Loading,
    Ready(Arc<Engine>),
    Failed(String),
}

/// Shared state behind the router.
pub struct AppState {
    config: ServiceConfig,
    model: RwLock<ModelState>,
    images: DashMap<String, LoadedImage>,
    sessions: DashMap<String, Session>,
    next_session: AtomicU64,
    /// Serializes device-bound work; tokio's mutex hands out the lock in FIFO order.
    queue: Arc<tokio::sync::Mutex<()>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(AppState {
            config,
            model: RwLock::new(ModelState::Loading),
            images: DashMap::new(),
            sessions: DashMap::new(),
            next_session: AtomicU64::new(0),
            queue: Arc::new(tokio::sync::Mutex::new(())),
        })
    }

    pub fn with_engine(config: ServiceConfig, engine: Engine) -> Arc<Self> {
        let state = Self::new(config);
        state.set_ready(engine);
        state
    }

    pub fn set_ready(&self, engine: Engine) {
        *self.model.write().expect("model lock") = ModelState::Ready(Arc::new(engine));
    }

    pub fn set_failed(&self, reason: impl Into<String>) {
        *self.model.write().expect("model lock") = ModelState::Failed(reason.into());
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        match &*self.model.read().expect("model lock") {
            ModelState::Ready(e) => Ok(e.clone()),
            ModelState::Loading => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is still loading")),
            ModelState::Failed(why) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("model failed to load: {why}"))),
        }
    }

    /// Store an image under the hash of its bytes.
    pub fn add_image(&self, bytes: &[u8]) -> Result<ImageInfo, ApiError> {
        let image_id = hex::encode(&Sha256::digest(bytes)[..8]);
        if let Some(img) = self.images.get(&image_id) {
            let (height, width) = img.shape();
            return Ok(ImageInfo { image_id, width, height });
        }
        let pixels = image::load_from_memory(bytes)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("cannot decode image: {e}")))?
            .to_rgb8();
        let (width, height) = (pixels.width() as usize, pixels.height() as usize);
        let sample = ImageSample { image_id: image_id.clone(), width, height, uri_or_path: format!("upload:{image_id}") };
        let loaded = LoadedImage::new(sample, Arc::new(pixels)).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        self.images.insert(image_id.clone(), loaded);
        Ok(ImageInfo { image_id, width, height })
    }

    /// Run one segmentation request, recording it in its session.
    pub async fn segment(self: &Arc<Self>, req: SegmentRequest) -> Result<SegmentResponse, ApiError> {
        let engine = self.engine()?;
        let image = self
            .images
            .get(&req.image_id)
            .map(|e| e.clone())
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image {:?}", req.image_id)))?;
        let session_id = match &req.session_id {
            Some(id) => {
                if let Some(s) = self.sessions.get(id) {
                    if s.image_id != req.image_id {
                        return Err(ApiError::unprocessable(format!("session {id} belongs to image {}", s.image_id)));
                    }
                }
                id.clone()
            }
            None => format!("s{:06}", self.next_session.fetch_add(1, Ordering::Relaxed)),
        };
        let interaction = InteractionSet::new(session_id.clone(), req.clicks.clone(), req.text.clone()).map_err(ApiError::from_data)?;
        let (h, w) = image.shape();
        interaction.check_bounds(w, h).map_err(ApiError::from_data)?;

        let guard = self.queue.clone().lock_owned().await;
        let set = interaction.clone();
        let img = image.clone();
        let prediction = tokio::task::spawn_blocking(move || {
            let _guard = guard;
            engine.checkpoint.predict_instance(&img, &set, engine.saliency.as_ref())
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from_predict)?;

        let mask_rle = WireRle::from_rle(&prediction.mask.rle)?;
        let preview = if req.saliency_preview {
            prediction.saliency.as_deref().map(|s| SaliencyPreview::from_map(s, self.config.preview_size))
        } else {
            None
        };
        let mask_id = {
            let mut s = self
                .sessions
                .entry(session_id.clone())
                .or_insert_with(|| Session::new(session_id.clone(), req.image_id.clone()));
            s.push(interaction, mask_rle.clone())
        };
        Ok(SegmentResponse {
            image_id: req.image_id,
            session_id,
            mask_id,
            width: w,
            height: h,
            mask_rle,
            confidence: prediction.confidence,
            saliency_preview: preview,
        })
    }

    pub fn session(&self, id: &str) -> Option<Session> {
        self.sessions.get(id).map(|s| s.clone())
    }

    pub fn health(&self) -> Health {
        match &*self.model.read().expect("model lock") {
            ModelState::Loading => Health { status: "loading".into(), checkpoint_manifest: None, backend_id: None, error: None },
            ModelState::Failed(why) => Health { status: "failed".into(), checkpoint_manifest: None, backend_id: None, error: Some(why.clone()) },
            ModelState::Ready(e) => Health {
                status: "ready".into(),
                checkpoint_manifest: Some(e.checkpoint.manifest.clone()),
                backend_id: e.saliency.as_ref().map(|s| s.backend.id().to_string()),
                error: None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_id: String,
    #[serde(default)]
    pub clicks: Vec<Click>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub session_id: Option<String>,
    /// Return a downsampled saliency grid for overlays.
    #[serde(default)]
    pub saliency_preview: bool,
}

/// COCO-style uncompressed RLE: column-major run lengths starting with zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl WireRle {
    pub fn from_rle(rle: &crate::data::Rle) -> Result<Self, ApiError> {
        let counts = rle.to_coco_counts().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok(WireRle { size: [rle.height(), rle.width()], counts })
    }

    pub fn to_rle(&self) -> Result<crate::data::Rle, DataError> {
        crate::data::Rle::from_coco_counts(self.size[0], self.size[1], &self.counts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyPreview {
    pub width: usize,
    pub height: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f32>,
}

impl SaliencyPreview {
    /// Block-average `map` down so its longer side is at most `max_side`,
    /// then min-max scale into `[0, 1]`.
    pub fn from_map(map: &SaliencyMap, max_side: usize) -> Self {
        let (h, w) = map.shape();
        let scale = (h.max(w) as f64 / max_side.max(1) as f64).max(1.0);
        let (ph, pw) = (((h as f64 / scale).round() as usize).max(1), ((w as f64 / scale).round() as usize).max(1));
        let mut values = Vec::with_capacity(ph * pw);
        for py in 0..ph {
            for px in 0..pw {
                let (y0, y1) = (py * h / ph, ((py + 1) * h / ph).max(py * h / ph + 1));
                let (x0, x1) = (px * w / pw, ((px + 1) * w / pw).max(px * w / pw + 1));
                let block = map.values.slice(ndarray::s![y0..y1, x0..x1]);
                values.push(block.mean().unwrap_or(0.0));
            }
        }
        let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        for v in &mut values {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
        SaliencyPreview { width: pw, height: ph, values }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub image_id: String,
    pub session_id: String,
    pub mask_id: String,
    pub width: usize,
    pub height: usize,
    pub mask_rle: WireRle,
    pub confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saliency_preview: Option<SaliencyPreview>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_manifest: Option<TrainingManifest>,
    pub backend_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// An error with its HTTP status; renders as `{"error": ...}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn from_data(e: DataError) -> Self {
        Self::unprocessable(e.to_string())
    }

    fn from_predict(e: PredictError) -> Self {
        match e {
            PredictError::NoBackend(_) => Self::unprocessable(e.to_string()),
            PredictError::Dataset(crate::dataset::DatasetError::Data(d)) => Self::from_data(d),
            PredictError::Dataset(crate::dataset::DatasetError::Saliency(s)) => Self::unprocessable(s.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.status, self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

async fn upload(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Result<Json<ImageInfo>, ApiError> {
    let st = state.clone();
    tokio::task::spawn_blocking(move || st.add_image(&body))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
}

async fn segment(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Result<Json<SegmentResponse>, ApiError> {
    // Parsed by hand so malformed bodies also answer with the JSON error shape.
    let req: SegmentRequest = serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("bad request body: {e}")))?;
    state.segment(req).await.map(Json)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(state.health())
}

async fn session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    state.session(&id).map(Json).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    let cfg = state.config().clone();
    let mut app = Router::new()
        .route("/v1/images", post(upload))
        .route("/v1/segment", post(segment))
        .route("/v1/health", get(health))
        .route("/v1/sessions/{id}", get(session));
    if let Some(dir) = &cfg.ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app.layer(DefaultBodyLimit::max(cfg.max_upload_bytes))
        .layer(TimeoutLayer::with_status_code(StatusCode::REQUEST_TIMEOUT, cfg.request_timeout))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Bind, start loading the model in the background and serve until ctrl-c.
/// `/v1/health` reports `loading` until `load` returns.
pub async fn serve<F>(config: ServiceConfig, load: F) -> std::io::Result<()>
where
    F: FnOnce() -> Result<Engine, String> + Send + 'static,
{
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad address: {e}")))?;
    let state = AppState::new(config);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    let loading = state.clone();
    tokio::task::spawn_blocking(move || match load() {
        Ok(engine) => {
            tracing::info!("model ready");
            loading.set_ready(engine);
        }
        Err(why) => {
            tracing::error!(%why, "model failed to load");
            loading.set_failed(why);
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
