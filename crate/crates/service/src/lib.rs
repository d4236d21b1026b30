//! HTTP service behind the interactive adjust tool: upload a volume, look at
//! its slices, get orientation predictions, apply a correction and download
//! the result.
//!
//! Uploaded volumes live in `<workdir>/<id>/`, so nothing but that directory
//! survives a restart. Requests on one volume are serialized by a per-id lock;
//! the model is shared read-only.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cmrorient::nets::Model;
use cmrorient::standardize::{correct, recognize, StandardizeError};
use cmrorient::volume::{decode_nifti, write_volume, Volume};
use cmrorient_client::{AdjustRequest, ErrorBody, Prediction, VolumeInfo};
use tokio::sync::Mutex;

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 256 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workdir: PathBuf,
    pub max_upload_bytes: usize,
}

impl ServiceConfig {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        ServiceConfig { workdir: workdir.into(), max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES }
    }
}

struct Shared {
    model: Model,
    workdir: PathBuf,
    locks: std::sync::Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

#[derive(Clone)]
struct AppState(Arc<Shared>);

impl AppState {
    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.0.locks.lock().expect("lock table poisoned");
        locks.entry(id.to_string()).or_default().clone()
    }

    /// File holding the current state of volume `id`.
    fn volume_file(&self, id: &str) -> Result<PathBuf, ApiError> {
        // ids are server-issued UUIDs; anything else cannot name a stored volume
        let id = uuid::Uuid::parse_str(id).map_err(|_| ApiError::unknown(id))?.to_string();
        let dir = self.0.workdir.join(&id);
        ["volume.nii", "volume.nii.gz"]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| ApiError::unknown(&id))
    }
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn unknown(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("no volume with id {id}"))
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}", self.message);
        }
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn load(path: &Path) -> Result<Volume, ApiError> {
    let bytes = tokio::fs::read(path).await.map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    blocking(move || decode_nifti(&bytes).map_err(ApiError::internal)).await
}

/// Builds the application router. Creates `workdir` if needed.
pub fn router(model: Model, config: ServiceConfig) -> std::io::Result<Router> {
    std::fs::create_dir_all(&config.workdir)?;
    let state = AppState(Arc::new(Shared { model, workdir: config.workdir, locks: Default::default() }));
    Ok(Router::new()
        .route("/volumes", post(upload))
        .route("/volumes/{id}/slices/{k}", get(slice_png))
        .route("/volumes/{id}/prediction", get(prediction))
        .route("/volumes/{id}/adjust", post(adjust))
        .route("/volumes/{id}/save", post(save).get(save))
        .layer(DefaultBodyLimit::max(config.max_upload_bytes))
        .with_state(state))
}

/// Serves `router` on `listener` until the process is stopped.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router).await
}

async fn upload(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<VolumeInfo>), ApiError> {
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty upload"));
    }
    let bytes = body.clone();
    let vol = blocking(move || decode_nifti(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))).await?;
    let id = uuid::Uuid::new_v4().to_string();
    let dir = state.0.workdir.join(&id);
    let name = if body.starts_with(&[0x1f, 0x8b]) { "volume.nii.gz" } else { "volume.nii" };
    tokio::fs::create_dir_all(&dir).await.map_err(ApiError::internal)?;
    tokio::fs::write(dir.join(name), &body).await.map_err(ApiError::internal)?;
    let (sx, sy, sz) = vol.dims();
    log::info!("stored volume {id} ({sx}x{sy}x{sz})");
    Ok((StatusCode::CREATED, Json(VolumeInfo { id, dims: [sx, sy, sz], spacing: vol.spacing(), max_gray: vol.max_gray() })))
}

async fn predict(state: &AppState, id: &str, path: &Path) -> Result<Prediction, ApiError> {
    let vol = load(path).await?;
    let st = state.clone();
    let rec = blocking(move || match recognize(&vol, &st.0.model) {
        Ok(r) => Ok(Some(r)),
        Err(StandardizeError::EmptyVolume) => Ok(None),
        Err(e) => Err(ApiError::internal(e)),
    })
    .await?;
    Ok(match rec {
        Some(r) => Prediction {
            id: id.to_string(),
            slices: r.slices,
            consensus: Some(r.consensus),
            confidence: Some(r.confidence),
            unanimous: Some(r.unanimous),
        },
        None => Prediction { id: id.to_string(), slices: Vec::new(), consensus: None, confidence: None, unanimous: None },
    })
}

async fn prediction(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Prediction>, ApiError> {
    let path = state.volume_file(&id)?;
    let lock = state.lock_for(&id);
    let _guard = lock.lock().await;
    Ok(Json(predict(&state, &id, &path).await?))
}

/// Slice `k` windowed to `[0, G]` (G = volume maximum) as 8-bit grayscale,
/// laid out for display: column = x, first row = largest y.
pub fn render_slice(vol: &Volume, k: usize) -> Option<Vec<u8>> {
    let slice = vol.slice(k)?;
    let (sx, sy) = slice.dim();
    let g = vol.max_gray();
    let mut pixels = Vec::with_capacity(sx * sy);
    for r in 0..sy {
        for x in 0..sx {
            let v = slice[[x, sy - 1 - r]];
            let level = if g > 0.0 { (v / g).clamp(0.0, 1.0) * 255.0 } else { 0.0 };
            pixels.push(level.round() as u8);
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, sx as u32, sy as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().ok()?;
    writer.write_image_data(&pixels).ok()?;
    writer.finish().ok()?;
    Some(out)
}

async fn slice_png(State(state): State<AppState>, UrlPath((id, k)): UrlPath<(String, usize)>) -> Result<Response, ApiError> {
    let path = state.volume_file(&id)?;
    let lock = state.lock_for(&id);
    let _guard = lock.lock().await;
    let vol = load(&path).await?;
    let n = vol.slice_count();
    let png = blocking(move || render_slice(&vol, k).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("slice {k} out of range (volume has {n})")))).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn adjust(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<Prediction>, ApiError> {
    let path = state.volume_file(&id)?;
    let req: AdjustRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid adjust request: {e}")))?;
    let lock = state.lock_for(&id);
    let _guard = lock.lock().await;
    if !req.code.is_identity() {
        let vol = load(&path).await?;
        let target = path.clone();
        blocking(move || {
            let fixed = correct(&vol, req.code).map_err(ApiError::internal)?;
            write_volume(&fixed, &target).map_err(ApiError::internal)
        })
        .await?;
        log::info!("volume {id}: undid orientation {}", req.code);
    }
    Ok(Json(predict(&state, &id, &path).await?))
}

async fn save(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let path = state.volume_file(&id)?;
    let lock = state.lock_for(&id);
    let _guard = lock.lock().await;
    let bytes = tokio::fs::read(&path).await.map_err(ApiError::internal)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume.nii");
    let disposition = format!("attachment; filename=\"{id}_{name}\"");
    Ok(([(header::CONTENT_TYPE, "application/octet-stream".to_string()), (header::CONTENT_DISPOSITION, disposition)], bytes).into_response())
}
