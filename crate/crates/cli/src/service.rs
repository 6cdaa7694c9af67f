//! HTTP interface: `/health`, `/search`, `/caption` and `/image/{id}` over
//! a model and index loaded once at startup.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::QueryRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use capret_core::captioning::{generate_caption, GenerationConfig};
use capret_core::config::{RunConfig, ServeConfig};
use capret_core::data::{load_manifest, preprocess_encoded};
use capret_core::model::{CapRetModel, ModelDir};
use capret_core::retrieval::RetrievalIndex;
use serde::Deserialize;
use serde_json::json;

use crate::commands::{load_index, search_text};
use crate::{CliError, CliResult};

const BODY_LIMIT: usize = 16 * 1024 * 1024;

/// Immutable state shared by every request.
pub struct AppState {
    pub model: CapRetModel,
    pub index: RetrievalIndex,
    pub generation: GenerationConfig,
    pub serve: ServeConfig,
    /// Image files by id, for `/image/{id}`.
    pub images: HashMap<String, PathBuf>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        use capret_core::Error as E;
        match &e {
            CliError::Core(E::InvalidArgument(_) | E::Image { .. } | E::ContextOverflow { .. }) => {
                ApiError::bad_request(e.to_string())
            }
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/search", get(search_handler))
        .route("/caption", post(caption_handler))
        .route("/image/{id}", get(image_handler))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

#[derive(Debug, Deserialize)]
struct SearchParams {
    q: Option<String>,
    k: Option<usize>,
}

async fn search_handler(
    State(state): State<Arc<AppState>>,
    params: Result<Query<SearchParams>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(params) = params.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let q = params.q.unwrap_or_default();
    if q.trim().is_empty() {
        return Err(ApiError::bad_request("missing query parameter q"));
    }
    let k = params.k.unwrap_or(state.serve.default_k);
    if k == 0 || k > state.serve.max_k {
        return Err(ApiError::bad_request(format!("k must be in 1..={}", state.serve.max_k)));
    }
    let response = tokio::task::spawn_blocking(move || search_text(&state.model, &state.index, &q, k))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(response).into_response())
}

#[derive(Debug, Deserialize)]
struct CaptionBody {
    image_b64: String,
}

/// Image bytes from a multipart `image` field or a JSON `image_b64` body.
async fn caption_bytes(req: Request) -> Result<Vec<u8>, ApiError> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    if content_type.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?
        {
            if field.name() == Some("image") {
                let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
                return Ok(bytes.to_vec());
            }
        }
        return Err(ApiError::bad_request("multipart body has no \"image\" field"));
    }
    let Json(body) = Json::<CaptionBody>::from_request(req, &())
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?;
    base64::engine::general_purpose::STANDARD
        .decode(body.image_b64.trim())
        .map_err(|e| ApiError::bad_request(format!("image_b64 is not valid base64: {e}")))
}

async fn caption_handler(State(state): State<Arc<AppState>>, req: Request) -> Result<Response, ApiError> {
    let bytes = caption_bytes(req).await?;
    let caption = tokio::task::spawn_blocking(move || -> CliResult<String> {
        let image = preprocess_encoded(&bytes)?;
        let m = &state.model;
        Ok(generate_caption(&m.backbones, &m.bridge, &m.vocab, &image, &state.generation)?.text)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(json!({"caption": caption})).into_response())
}

async fn image_handler(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let path = state
        .images
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image id {id:?}")))?;
    let path = path.clone();
    let bytes = tokio::task::spawn_blocking(move || std::fs::read(&path).map_err(|e| (path, e)))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|(path, e)| ApiError::internal(format!("cannot read {}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Loads the model, index and image table for a configuration.
pub fn load_state(cfg: &RunConfig, dir: &ModelDir) -> CliResult<AppState> {
    let index = load_index(dir)?;
    if !dir.bridge_best().is_dir() {
        return Err(CliError::Runtime(format!(
            "no trained bridge in {}",
            dir.root().display()
        )));
    }
    let model = CapRetModel::load(dir)?;
    let mut images = HashMap::new();
    match &cfg.paths.manifest {
        Some(path) => {
            let manifest = load_manifest(path)?;
            for r in &manifest.records {
                images.insert(r.id(), manifest.image_path(r));
            }
        }
        None => tracing::warn!("no manifest configured; /image will answer 404"),
    }
    Ok(AppState {
        model,
        index,
        generation: cfg.generation,
        serve: cfg.serve.clone(),
        images,
    })
}

/// Runs the service until Ctrl-C; in-flight requests are allowed to finish.
pub fn serve_blocking(cfg: RunConfig, dir: &ModelDir) -> CliResult<()> {
    let state = Arc::new(load_state(&cfg, dir)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.serve.addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {}: {e}", cfg.serve.addr)))?;
        tracing::info!(addr = %cfg.serve.addr, images = state.index.len(), "serving");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                tracing::info!("shutting down");
            })
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}
