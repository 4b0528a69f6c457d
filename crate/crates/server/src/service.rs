//! Axum router over a loaded checkpoint.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::Engine;
use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tower_http::cors::{Any, CorsLayer};

use seg2hoi_core::decoder::ClassifierMode;
use seg2hoi_core::evalinfer::Quadruplet;
use seg2hoi_core::foundation::{SIZE_MULTIPLE, STRIDE};
use seg2hoi_core::model::Model;
use seg2hoi_core::openvocab::{OBJECT_TEMPLATE, VERB_TEMPLATE};

use crate::api::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Request body cap in bytes.
    pub max_body: usize,
    /// Cap on the decoded PNG size in bytes.
    pub max_image_bytes: usize,
    pub max_side: u32,
    pub max_stored_images: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_body: 8 << 20, max_image_bytes: 4 << 20, max_side: 1024, max_stored_images: 64 }
    }
}

#[derive(Default)]
struct ImageStore {
    images: HashMap<String, Arc<RgbImage>>,
    order: VecDeque<String>,
}

pub struct AppState {
    pub model: Model,
    pub checkpoint: String,
    pub limits: Limits,
    store: Mutex<ImageStore>,
}

impl AppState {
    pub fn new(model: Model, limits: Limits) -> seg2hoi_core::Result<Self> {
        let checkpoint = model.hash()?;
        Ok(AppState { model, checkpoint, limits, store: Mutex::new(ImageStore::default()) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.status, &ErrorBody { error: self.message })
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any);
    let limit = state.limits.max_body;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/meta", get(meta))
        .route("/v1/images", post(upload))
        .route("/v1/detect", post(detect))
        .route("/v1/prompt/visual", post(visual))
        .route("/v1/prompt/text", post(text))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

async fn health() -> Response {
    json_response(StatusCode::OK, &serde_json::json!({ "status": "ok" }))
}

async fn meta(State(s): State<Arc<AppState>>) -> Response {
    let c = &s.model.categories;
    let classifier = match s.model.decoder.config.classifier {
        ClassifierMode::Text => "text",
        ClassifierMode::Linear => "linear",
    };
    let body = MetaResponse {
        model: "seg2hoi".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        checkpoint: s.checkpoint.clone(),
        objects: c.objects.clone(),
        verbs: c.verbs.clone(),
        templates: Templates { object: OBJECT_TEMPLATE.into(), verb: VERB_TEMPLATE.into(), phrase: "person {verb} {object}".into() },
        classifier: classifier.into(),
        mask_stride: STRIDE,
        size_multiple: SIZE_MULTIPLE,
    };
    json_response(StatusCode::OK, &body)
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed request: {e}")))
}

/// Decodes a base64 PNG and checks it against the limits.
pub fn decode_image(b64: &str, limits: &Limits) -> ApiResult<RgbImage> {
    if b64.len() / 4 * 3 > limits.max_image_bytes + 3 {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("image exceeds {} bytes", limits.max_image_bytes)));
    }
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64.trim()).map_err(|e| ApiError::bad(format!("image is not valid base64: {e}")))?;
    if bytes.len() > limits.max_image_bytes {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("image exceeds {} bytes", limits.max_image_bytes)));
    }
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    let reader = image::ImageReader::with_format(std::io::Cursor::new(&bytes), image::ImageFormat::Png);
    let (w, h) = reader.into_dimensions().map_err(|e| unprocessable(format!("undecodable image: {e}")))?;
    if w > limits.max_side || h > limits.max_side {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("image {w}x{h} exceeds {} pixels per side", limits.max_side)));
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| unprocessable(format!("undecodable image: {e}")))?;
    check_size(img.width(), img.height())?;
    Ok(img.to_rgb8())
}

fn check_size(w: u32, h: u32) -> ApiResult<()> {
    if w == 0 || h == 0 || !w.is_multiple_of(SIZE_MULTIPLE) || !h.is_multiple_of(SIZE_MULTIPLE) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("image {w}x{h}: both sides must be positive multiples of {SIZE_MULTIPLE}")));
    }
    Ok(())
}

/// Content-derived id, so uploads are idempotent.
pub fn image_id(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    hex::encode(&h.finalize()[..12])
}

impl AppState {
    fn store_image(&self, img: RgbImage) -> String {
        let id = image_id(&img);
        let mut st = self.store.lock().expect("image store lock");
        if !st.images.contains_key(&id) {
            while st.order.len() >= self.limits.max_stored_images.max(1) {
                if let Some(old) = st.order.pop_front() {
                    st.images.remove(&old);
                }
            }
            st.order.push_back(id.clone());
            st.images.insert(id.clone(), Arc::new(img));
        }
        id
    }

    fn resolve(&self, req: &PromptRequest) -> ApiResult<Arc<RgbImage>> {
        match (&req.image_id, &req.image) {
            (Some(_), Some(_)) => Err(ApiError::bad("give either image_id or image, not both")),
            (None, None) => Err(ApiError::bad("missing image_id or image")),
            (None, Some(b64)) => Ok(Arc::new(decode_image(b64, &self.limits)?)),
            (Some(id), None) => {
                let st = self.store.lock().expect("image store lock");
                st.images.get(id).cloned().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image_id {id}")))
            }
        }
    }
}

async fn upload(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let run = || -> ApiResult<ImageInfo> {
        let req: ImageUpload = parse_body(&body)?;
        let img = decode_image(&req.image, &s.limits)?;
        let (width, height) = img.dimensions();
        Ok(ImageInfo { image_id: s.store_image(img), width, height })
    };
    match run() {
        Ok(info) => json_response(StatusCode::OK, &info),
        Err(e) => e.into_response(),
    }
}

fn check_kind(req: &PromptRequest, kind: PromptKind) -> ApiResult<()> {
    match req.kind {
        Some(k) if k != kind => Err(ApiError::bad(format!("kind {k:?} sent to the {kind:?} endpoint"))),
        _ => Ok(()),
    }
}

fn lambda_of(req: &PromptRequest) -> ApiResult<f64> {
    let l = req.lambda.unwrap_or(DEFAULT_LAMBDA);
    if !(0.0..=1.0).contains(&l) {
        return Err(ApiError::bad("lambda must lie in [0, 1]"));
    }
    Ok(l)
}

/// Validated request plus the work to run on the blocking pool.
async fn run_prompt(s: Arc<AppState>, body: Bytes, kind: PromptKind) -> Response {
    let prepared = (|| -> ApiResult<(PromptRequest, Arc<RgbImage>)> {
        let req: PromptRequest = parse_body(&body)?;
        check_kind(&req, kind)?;
        lambda_of(&req)?;
        match kind {
            PromptKind::Detect => {}
            PromptKind::Visual if req.points.is_empty() => return Err(ApiError::bad("visual prompts need at least one point")),
            PromptKind::Visual => {}
            PromptKind::Text if req.text.as_deref().is_none_or(|t| t.trim().is_empty()) => return Err(ApiError::bad("text prompts need a non-empty text")),
            PromptKind::Text if s.model.decoder.config.classifier != ClassifierMode::Text => {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "this checkpoint has no text classifier"))
            }
            PromptKind::Text => {}
        }
        let img = s.resolve(&req)?;
        let (w, h) = img.dimensions();
        check_size(w, h)?;
        if let Some(p) = req.points.iter().find(|p| p[0] >= w || p[1] >= h) {
            return Err(ApiError::bad(format!("point ({}, {}) lies outside the {w}x{h} image", p[0], p[1])));
        }
        Ok((req, img))
    })();
    let (req, img) = match prepared {
        Ok(x) => x,
        Err(e) => return e.into_response(),
    };
    let state = s.clone();
    let joined = tokio::task::spawn_blocking(move || answer(&state, &req, &img, kind)).await;
    match joined {
        Ok(Ok(r)) => json_response(StatusCode::OK, &r),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

/// Runs one validated prompt against the model.
pub fn answer(s: &AppState, req: &PromptRequest, img: &RgbImage, kind: PromptKind) -> ApiResult<QuadrupletResponse> {
    let internal = |e: seg2hoi_core::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let lambda = lambda_of(req)?;
    let a = s.model.analyze(img).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let qs: Vec<Quadruplet> = match kind {
        PromptKind::Detect => s.model.detect(&a, lambda, req.top_k.unwrap_or(DEFAULT_TOP_K), 0.0),
        PromptKind::Visual => {
            let pts: Vec<(u32, u32)> = req.points.iter().map(|p| (p[0], p[1])).collect();
            s.model.prompt_visual(&a, &pts, lambda).into_iter().collect()
        }
        PromptKind::Text => s.model.prompt_text(&a, req.text.as_deref().unwrap_or_default(), lambda).map_err(internal)?.into_iter().collect(),
    };
    let (w, h) = img.dimensions();
    Ok(response(&s.model, &s.checkpoint, w, h, &qs))
}

async fn detect(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    run_prompt(s, body, PromptKind::Detect).await
}

async fn visual(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    run_prompt(s, body, PromptKind::Visual).await
}

async fn text(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    run_prompt(s, body, PromptKind::Text).await
}
