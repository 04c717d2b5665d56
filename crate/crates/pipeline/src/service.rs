//! HTTP service for interactive sessions.
//!
//! Every session lives in its own directory below the data directory:
//!
//! ```text
//! sessions/<id>/session.json     manifest: settings, uploads, stage status
//! sessions/<id>/blobs/<sha256>.png
//! sessions/<id>/pois.json
//! sessions/<id>/out/             same artifacts as `ppm run`
//! ```
//!
//! Mutating requests on one session are serialized through a per-session
//! lock; reads never block.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use ppm_core::io::{self, AnnotationLegend, PoiSet};
use ppm_core::registration::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::config::{parse_json, Settings};
use crate::stages::{self, files, Artifacts, PoiSource};

const MANIFEST: &str = "session.json";
const POIS: &str = "pois.json";
const ROLES: [&str; 4] = ["s_o", "s_poi", "h_o", "h_a"];

#[derive(Clone)]
pub struct AppState {
    data_dir: PathBuf,
    locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            locks: Arc::default(),
        }
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.data_dir.join("sessions").join(id)
    }

    fn lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table poisoned")
            .entry(id.to_string())
            .or_default()
            .clone()
    }
}

/// Routes, CORS and, when `ui_dir` is given, the static front end.
pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/images/{role}", put(put_image))
        .route("/sessions/{id}/pois", put(put_pois))
        .route("/sessions/{id}/register", post(register))
        .route("/sessions/{id}/labels", post(labels))
        .route("/sessions/{id}/overlay", get(overlay))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/status", get(status))
        .with_state(state);
    let api = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.layer(CorsLayer::permissive())
}

pub async fn serve(port: u16, data_dir: PathBuf, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    std::fs::create_dir_all(data_dir.join("sessions"))?;
    let app = router(AppState::new(data_dir), ui_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Done,
    Failed(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    id: String,
    settings: Settings,
    /// Role to blob file name.
    images: BTreeMap<String, String>,
    pois: Option<usize>,
    register: StageStatus,
    labels: StageStatus,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn not_found() -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown session")
    }

    fn missing(what: &str) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            body: json!({ "missing": what }),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit() || b == b'-')
}

fn load_manifest(state: &AppState, id: &str) -> ApiResult<Manifest> {
    if !valid_id(id) {
        return Err(ApiError::not_found());
    }
    let path = state.session_dir(id).join(MANIFEST);
    if !path.exists() {
        return Err(ApiError::not_found());
    }
    io::read_json(&path).map_err(ApiError::internal)
}

fn save_manifest(state: &AppState, m: &Manifest) -> ApiResult<()> {
    let dir = state.session_dir(&m.id);
    let tmp = dir.join("session.json.tmp");
    io::write_json(&tmp, m).map_err(ApiError::internal)?;
    std::fs::rename(&tmp, dir.join(MANIFEST)).map_err(ApiError::internal)
}

fn read_blob(state: &AppState, m: &Manifest, role: &str) -> ApiResult<Option<Vec<u8>>> {
    match m.images.get(role) {
        Some(name) => {
            let path = state.session_dir(&m.id).join("blobs").join(name);
            io::read_bytes(&path).map(Some).map_err(ApiError::internal)
        }
        None => Ok(None),
    }
}

fn require_blob(state: &AppState, m: &Manifest, role: &str) -> ApiResult<Vec<u8>> {
    read_blob(state, m, role)?.ok_or_else(|| ApiError::missing(role))
}

fn decode_rgb(bytes: &[u8]) -> ApiResult<RgbImage> {
    io::decode_rgb(bytes).map_err(ApiError::internal)
}

async fn create_session(
    State(state): State<AppState>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let settings: Settings = if body.iter().all(u8::is_ascii_whitespace) {
        Settings::default()
    } else {
        let text =
            std::str::from_utf8(&body).map_err(|_| ApiError::unprocessable("body is not UTF-8"))?;
        parse_json(text).map_err(|e| ApiError::unprocessable(e.to_string()))?
    };
    settings
        .validate()
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let manifest = Manifest {
        id: id.clone(),
        settings,
        images: BTreeMap::new(),
        pois: None,
        register: StageStatus::Pending,
        labels: StageStatus::Pending,
    };
    std::fs::create_dir_all(state.session_dir(&id).join("blobs")).map_err(ApiError::internal)?;
    save_manifest(&state, &manifest)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn put_image(
    State(state): State<AppState>,
    UrlPath((id, role)): UrlPath<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let lock = state.lock(&id);
    let _guard = lock.lock().await;
    let mut m = load_manifest(&state, &id)?;
    if !ROLES.contains(&role.as_str()) {
        return Err(ApiError::unprocessable(format!(
            "unknown image role {role:?}; expected one of s_o, s_poi, h_o, h_a"
        )));
    }
    let (width, height) = match role.as_str() {
        "h_a" => io::decode_annotation(&body, &AnnotationLegend::default()).map(|a| a.dims()),
        _ => io::decode_rgb(&body).map(|i| i.dims()),
    }
    .map_err(|e| ApiError::unprocessable(format!("{role}: {e}")))?;

    let digest = hex::encode(Sha256::digest(&body));
    let name = format!("{digest}.png");
    let path = state.session_dir(&id).join("blobs").join(&name);
    if !path.exists() {
        io::write_bytes(&path, &body).map_err(ApiError::internal)?;
    }
    m.images.insert(role.clone(), name);
    if matches!(role.as_str(), "s_o" | "h_o") {
        m.register = StageStatus::Pending;
    }
    m.labels = StageStatus::Pending;
    save_manifest(&state, &m)?;
    Ok(Json(
        json!({ "role": role, "sha256": digest, "width": width, "height": height }),
    ))
}

async fn put_pois(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let lock = state.lock(&id);
    let _guard = lock.lock().await;
    let mut m = load_manifest(&state, &id)?;
    let text =
        std::str::from_utf8(&body).map_err(|_| ApiError::unprocessable("body is not UTF-8"))?;
    let set: PoiSet = parse_json(text).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    set.validate(m.settings.registration.working_dims)
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    io::write_json(&state.session_dir(&id).join(POIS), &set).map_err(ApiError::internal)?;
    m.settings.poi_radius_px = set.radius;
    m.pois = Some(set.centers.len());
    m.labels = StageStatus::Pending;
    save_manifest(&state, &m)?;
    Ok(Json(
        json!({ "count": set.centers.len(), "radius": set.radius }),
    ))
}

async fn register(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let lock = state.lock(&id);
    let _guard = lock.lock().await;
    let mut m = load_manifest(&state, &id)?;
    let specimen = require_blob(&state, &m, "s_o")?;
    let histology = require_blob(&state, &m, "h_o")?;
    let out = Artifacts::new(state.session_dir(&id).join("out"));
    let settings = m.settings.clone();
    let outcome = tokio::task::spawn_blocking(move || -> Result<(), String> {
        let specimen = io::decode_rgb(&specimen).map_err(|e| e.to_string())?;
        let histology = io::decode_rgb(&histology).map_err(|e| e.to_string())?;
        stages::run_registration(&specimen, &histology, &settings, &out)
            .map(|_| ())
            .map_err(|e| e.to_string())
    })
    .await
    .map_err(ApiError::internal)?;
    m.labels = StageStatus::Pending;
    match outcome {
        Ok(_) => {
            m.register = StageStatus::Done;
            save_manifest(&state, &m)?;
            let metrics =
                io::read_bytes(&state.session_dir(&id).join("out").join(files::REGISTRATION))
                    .map_err(ApiError::internal)?;
            Ok(json_bytes(metrics))
        }
        Err(e) => {
            m.register = StageStatus::Failed(e.clone());
            save_manifest(&state, &m)?;
            Err(ApiError::unprocessable(e))
        }
    }
}

async fn labels(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let lock = state.lock(&id);
    let _guard = lock.lock().await;
    let mut m = load_manifest(&state, &id)?;
    if m.register != StageStatus::Done {
        return Err(ApiError::missing("register"));
    }
    let dir = state.session_dir(&id);
    let pois = if m.pois.is_some() {
        PoiSource::Points(io::read_json(&dir.join(POIS)).map_err(ApiError::internal)?)
    } else if let Some(bytes) = read_blob(&state, &m, "s_poi")? {
        PoiSource::Image(decode_rgb(&bytes)?)
    } else {
        return Err(ApiError::missing("pois"));
    };
    let annotation = require_blob(&state, &m, "h_a")?;
    let specimen = decode_rgb(&require_blob(&state, &m, "s_o")?)?;
    let out = Artifacts::new(dir.join("out"));
    let settings = m.settings.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let annotation = io::decode_annotation(&annotation, &AnnotationLegend::default())
            .map_err(|e| e.to_string())?;
        let ddf = out.read_ddf().map_err(|e| e.to_string())?;
        stages::run_labels(&specimen, &pois, &annotation, &ddf, &settings, &out)
            .map(|l| stages::report_json(&l.report))
            .map_err(|e| e.to_string())
    })
    .await
    .map_err(ApiError::internal)?;
    match outcome {
        Ok(report) => {
            m.labels = StageStatus::Done;
            save_manifest(&state, &m)?;
            Ok(json_bytes(report))
        }
        Err(e) => {
            m.labels = StageStatus::Failed(e.clone());
            save_manifest(&state, &m)?;
            Err(ApiError::unprocessable(e))
        }
    }
}

#[derive(Deserialize)]
struct OverlayQuery {
    alpha: Option<String>,
}

async fn overlay(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<OverlayQuery>,
) -> ApiResult<Response> {
    let m = load_manifest(&state, &id)?;
    if m.register != StageStatus::Done {
        return Err(ApiError::missing("register"));
    }
    let alpha = match q.alpha.as_deref() {
        None => 0.5,
        Some(s) => match s.parse::<f64>() {
            Ok(a) if (0.0..=1.0).contains(&a) => a,
            _ => {
                return Err(ApiError::unprocessable(format!(
                    "alpha must be a number in [0, 1], got {s:?}"
                )))
            }
        },
    };
    let out = Artifacts::new(state.session_dir(&id).join("out"));
    let fixed = io::read_gray(&out.path(stages::fixed_image_file(m.settings.fixed_image_role)))
        .map_err(ApiError::internal)?;
    let warped = io::read_gray(&out.path(files::WARPED)).map_err(ApiError::internal)?;
    let blend = stages::overlay(&fixed, &warped, alpha).map_err(ApiError::internal)?;
    let png = io::encode_gray8(&blend).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn report(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let m = load_manifest(&state, &id)?;
    if m.labels != StageStatus::Done {
        return Err(ApiError::missing("labels"));
    }
    let path = state.session_dir(&id).join("out").join(files::LABELS);
    Ok(json_bytes(
        io::read_bytes(&path).map_err(ApiError::internal)?,
    ))
}

async fn status(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let m = load_manifest(&state, &id)?;
    let images: BTreeMap<&str, bool> = ROLES
        .iter()
        .map(|r| (*r, m.images.contains_key(*r)))
        .collect();
    Ok(Json(json!({
        "id": m.id,
        "settings": m.settings,
        "images": images,
        "pois": m.pois,
        "stages": { "register": m.register, "labels": m.labels },
    })))
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}
