//! JSON-over-HTTP service for reconstruction, editing, segmentation and
//! orbit rendering. Images travel as base64 PNG.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use headlift_core::edit_encoder::{
    embed_style, BuiltinStyleEmbedder, Segmenter, StubSegmenter, StyleEmbedder, StyleInput,
};
use headlift_core::gaussian::{Camera, GaussianCloud, DEFAULT_CAMERA_DISTANCE};
use headlift_core::model::Model;
use headlift_core::preprocess::prepare;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::formats;
use crate::run::STYLE_EMBEDDER_SEED;

pub const DEFAULT_CAPACITY: usize = 32;
pub const MAX_RENDER_SIZE: usize = 1024;

/// Read-only inference state shared by all requests.
pub struct Engine {
    pub model: Model,
    pub checkpoint_id: String,
    pub segmenter: Box<dyn Segmenter>,
    pub embedder: Box<dyn StyleEmbedder>,
}

impl Engine {
    pub fn new(model: Model, checkpoint_id: String) -> Self {
        Self {
            model,
            checkpoint_id,
            segmenter: Box::new(StubSegmenter),
            embedder: Box::new(BuiltinStyleEmbedder::new(STYLE_EMBEDDER_SEED)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionSource {
    Reconstruct,
    Edit,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub session_id: String,
    pub cloud: Arc<GaussianCloud>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub source: SessionSource,
    last_used: u64,
}

/// Sessions with least-recently-rendered eviction. Creation counts as a use.
pub struct SessionStore {
    capacity: usize,
    clock: u64,
    salt: u64,
    sessions: HashMap<String, Session>,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        let salt = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64);
        Self {
            capacity: capacity.max(1),
            clock: 0,
            salt,
            sessions: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn contains(&self, id: &str) -> bool {
        self.sessions.contains_key(id)
    }

    /// Store a cloud, evicting the least recently used session when full.
    pub fn insert(&mut self, cloud: GaussianCloud, source: SessionSource) -> String {
        self.clock += 1;
        let id = format!(
            "{:016x}{:08x}",
            self.salt.rotate_left(17) ^ self.clock.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            self.clock
        );
        while self.sessions.len() >= self.capacity {
            let oldest = self
                .sessions
                .values()
                .min_by_key(|s| s.last_used)
                .map(|s| s.session_id.clone());
            match oldest {
                Some(k) => self.sessions.remove(&k),
                None => break,
            };
        }
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        self.sessions.insert(
            id.clone(),
            Session {
                session_id: id.clone(),
                cloud: Arc::new(cloud),
                created_at,
                source,
                last_used: self.clock,
            },
        );
        id
    }

    /// Fetch a session's cloud and mark it used.
    pub fn touch(&mut self, id: &str) -> Option<Arc<GaussianCloud>> {
        self.clock += 1;
        let s = self.sessions.get_mut(id)?;
        s.last_used = self.clock;
        Some(s.cloud.clone())
    }
}

pub struct AppState {
    engine: RwLock<Option<Arc<Engine>>>,
    pub sessions: Mutex<SessionStore>,
}

impl AppState {
    pub fn new(capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            engine: RwLock::new(None),
            sessions: Mutex::new(SessionStore::new(capacity)),
        })
    }

    pub fn install(&self, engine: Engine) {
        *self.engine.write().expect("engine lock") = Some(Arc::new(engine));
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.engine
            .read()
            .expect("engine lock")
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn field(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: format!("{field}: {}", message.into()),
            field: Some(field),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<headlift_core::Error> for ApiError {
    fn from(e: headlift_core::Error) -> Self {
        use headlift_core::Error as E;
        let status = match e {
            E::EmptyInput(_) => StatusCode::UNPROCESSABLE_ENTITY,
            E::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn body_object(body: &[u8]) -> Result<Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::field("body", "expected a JSON object")),
        Err(e) => Err(ApiError::field("body", format!("invalid JSON: {e}"))),
    }
}

fn string_field<'a>(
    obj: &'a Map<String, Value>,
    field: &'static str,
) -> Result<Option<&'a str>, ApiError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ApiError::field(field, "expected a string")),
    }
}

fn required<'a>(obj: &'a Map<String, Value>, field: &'static str) -> Result<&'a str, ApiError> {
    string_field(obj, field)?.ok_or_else(|| ApiError::field(field, "missing"))
}

/// Base64 payload, with or without a `data:` URL prefix.
fn decode_b64(field: &'static str, s: &str) -> Result<Vec<u8>, ApiError> {
    let raw = match s.strip_prefix("data:") {
        Some(rest) => rest
            .split_once(',')
            .map(|(_, d)| d)
            .ok_or_else(|| ApiError::field(field, "malformed data URL"))?,
        None => s,
    };
    B64.decode(raw.trim())
        .map_err(|e| ApiError::field(field, format!("invalid base64: {e}")))
}

fn decode_image_field(
    field: &'static str,
    s: &str,
) -> Result<
    (
        headlift_core::image::Image,
        Option<headlift_core::image::Mask>,
    ),
    ApiError,
> {
    formats::decode_image(&decode_b64(field, s)?).map_err(|e| ApiError::field(field, e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(ApiError::internal)?
}

async fn health(State(app): State<Arc<AppState>>) -> Response {
    match app.engine() {
        Ok(e) => Json(json!({ "status": "ok", "checkpoint_id": e.checkpoint_id })).into_response(),
        Err(_) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "loading", "checkpoint_id": null })),
        )
            .into_response(),
    }
}

async fn segment(State(app): State<Arc<AppState>>, body: axum::body::Bytes) -> ApiResult {
    let engine = app.engine()?;
    let obj = body_object(&body)?;
    let (image, mask) = decode_image_field("image", required(&obj, "image")?)?;
    blocking(move || {
        let aligned = prepare(
            &image,
            mask.as_ref(),
            "request",
            &engine.model.config.preprocess,
        )?;
        let seg = engine.segmenter.segment(&aligned)?;
        let png = formats::encode_seg_png(&seg).map_err(ApiError::internal)?;
        Ok(Json(json!({
            "seg_map": B64.encode(png),
            "size": seg.size,
            "palette": formats::palette(),
            "stub": engine.segmenter.is_stub(),
        })))
    })
    .await
}

async fn reconstruct(State(app): State<Arc<AppState>>, body: axum::body::Bytes) -> ApiResult {
    let engine = app.engine()?;
    let obj = body_object(&body)?;
    let (image, alpha_mask) = decode_image_field("image", required(&obj, "image")?)?;
    let mask = match string_field(&obj, "mask")? {
        Some(s) => Some(
            formats::decode_mask(&decode_b64("mask", s)?)
                .map_err(|e| ApiError::field("mask", e.to_string()))?,
        ),
        None => alpha_mask,
    };
    if let Some(m) = &mask {
        if (m.width, m.height) != (image.width, image.height) {
            return Err(ApiError::field("mask", "size differs from the image"));
        }
    }
    let cloud = blocking(move || {
        let input = engine.model.lift_input(&image, mask.as_ref(), "request")?;
        Ok(engine.model.reconstruct(&input)?)
    })
    .await?;
    let id = app
        .sessions
        .lock()
        .expect("session lock")
        .insert(cloud, SessionSource::Reconstruct);
    Ok(Json(json!({ "session_id": id })))
}

async fn edit(State(app): State<Arc<AppState>>, body: axum::body::Bytes) -> ApiResult {
    let engine = app.engine()?;
    let obj = body_object(&body)?;
    let seg_bytes = decode_b64("seg_map", required(&obj, "seg_map")?)?;
    let seg = formats::decode_seg_png(&seg_bytes)
        .map_err(|e| ApiError::field("seg_map", e.to_string()))?;
    let size = engine.model.config.preprocess.size;
    if seg.size != size {
        return Err(ApiError::field(
            "seg_map",
            format!("expected {size}x{size}, got {0}x{0}", seg.size),
        ));
    }
    let style = match obj.get("style") {
        Some(Value::Object(s)) => s,
        Some(_) => return Err(ApiError::field("style", "expected an object")),
        None => return Err(ApiError::field("style", "missing")),
    };
    let value = string_field(style, "value")
        .map_err(|_| ApiError::field("style.value", "expected a string"))?
        .ok_or_else(|| ApiError::field("style.value", "missing"))?
        .to_string();
    enum Style {
        Text(String),
        Image(
            headlift_core::image::Image,
            Option<headlift_core::image::Mask>,
        ),
    }
    let style = match style.get("type").and_then(Value::as_str) {
        Some("text") => Style::Text(value),
        Some("image") => {
            let (img, m) = decode_image_field("style.value", &value)?;
            Style::Image(img, m)
        }
        _ => {
            return Err(ApiError::field(
                "style.type",
                "expected \"text\" or \"image\"",
            ))
        }
    };
    let cloud = blocking(move || {
        let emb = match &style {
            Style::Text(t) => embed_style(StyleInput::Text(t), engine.embedder.as_ref())?,
            Style::Image(img, m) => {
                let aligned = prepare(img, m.as_ref(), "style", &engine.model.config.preprocess)?;
                embed_style(
                    StyleInput::Image {
                        image: &aligned.pixels,
                        id: "style",
                    },
                    engine.embedder.as_ref(),
                )?
            }
        };
        Ok(engine.model.reconstruct_edit(&seg, &emb)?)
    })
    .await?;
    let id = app
        .sessions
        .lock()
        .expect("session lock")
        .insert(cloud, SessionSource::Edit);
    Ok(Json(json!({ "session_id": id })))
}

fn query_f64(
    q: &HashMap<String, String>,
    field: &'static str,
    default: f64,
) -> Result<f64, ApiError> {
    match q.get(field) {
        None => Ok(default),
        Some(s) => s
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| ApiError::field(field, "expected a finite number")),
    }
}

async fn render(
    State(app): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let engine = app.engine()?;
    let id = q
        .get("session_id")
        .ok_or_else(|| ApiError::field("session_id", "missing"))?;
    let yaw = query_f64(&q, "yaw", 0.0)?;
    let pitch = query_f64(&q, "pitch", 0.0)?;
    if !(-89.0..=89.0).contains(&pitch) {
        return Err(ApiError::field("pitch", "must lie in [-89, 89] degrees"));
    }
    let distance = query_f64(&q, "distance", DEFAULT_CAMERA_DISTANCE)?;
    if distance <= 0.0 {
        return Err(ApiError::field("distance", "must be positive"));
    }
    let size = match q.get("size") {
        None => engine.model.config.preprocess.size,
        Some(s) => s
            .parse::<usize>()
            .ok()
            .filter(|v| (1..=MAX_RENDER_SIZE).contains(v))
            .ok_or_else(|| {
                ApiError::field(
                    "size",
                    format!("expected an integer in 1..={MAX_RENDER_SIZE}"),
                )
            })?,
    };
    let cloud = app
        .sessions
        .lock()
        .expect("session lock")
        .touch(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
    blocking(move || {
        let camera = Camera::orbit(yaw, pitch, distance, size, size);
        let out = engine.model.render(&cloud, &camera, true)?;
        let image = formats::encode_png(&out.image).map_err(ApiError::internal)?;
        let alpha = formats::encode_gray_png(size, size, &out.alpha).map_err(ApiError::internal)?;
        Ok(Json(json!({
            "image": B64.encode(image),
            "alpha": B64.encode(alpha),
            "camera": formats::CameraJson::from(&camera),
        })))
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/segment", post(segment))
        .route("/reconstruct", post(reconstruct))
        .route("/edit", post(edit))
        .route("/render", get(render))
        .with_state(state)
}
