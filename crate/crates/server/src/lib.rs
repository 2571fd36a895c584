//! HTTP service over a trained checkpoint: prompted embeddings with attention
//! overlays, retrieval against a persisted gallery index, index builds and
//! gallery thumbnails.
//!
//! The model and the index are immutable snapshots behind `Arc`s. A build
//! writes the new index to disk, then swaps the pointer, so readers see either
//! the old index or the new one.

pub mod api;
pub mod error;
pub mod overlay;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use candle_core::DType;
use image::RgbImage;
use kpr::checkpoint::{self, LoadedModel};
use kpr::datamodel::io::{image_path, load_split};
use kpr::datamodel::SplitName;
use kpr::model::head::PartDescriptor;
use kpr::retrieval::{rank_gallery, GalleryIndex, INDEX_MANIFEST};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use api::{BuildRequest, BuildResponse, EmbedRequest, EmbedResponse, Health, RetrieveRequest, RetrievedItem};
pub use error::ApiError;

/// Request bodies above this size are refused with 413.
pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

/// Written next to a persisted index so thumbnails survive restarts.
pub const SOURCE_FILE: &str = "source.json";

const EMBED_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GallerySource {
    pub dataset_root: PathBuf,
    pub split: SplitName,
}

pub struct Gallery {
    pub index: GalleryIndex,
    pub source: Option<GallerySource>,
}

pub struct AppState {
    model: Option<Arc<LoadedModel>>,
    gallery: RwLock<Option<Arc<Gallery>>>,
    building: Mutex<()>,
    index_dir: Option<PathBuf>,
}

impl AppState {
    /// Loads the index under `index_dir` when one is there. A missing
    /// directory is fine: the first build creates it.
    pub fn new(model: Option<LoadedModel>, index_dir: Option<PathBuf>) -> kpr::Result<Self> {
        let gallery = match &index_dir {
            Some(dir) if dir.join(INDEX_MANIFEST).exists() => Some(Arc::new(load_gallery(dir)?)),
            _ => None,
        };
        if let (Some(m), Some(g)) = (&model, &gallery) {
            check_shape(&m.model, &g.index)?;
        }
        Ok(AppState {
            model: model.map(Arc::new),
            gallery: RwLock::new(gallery),
            building: Mutex::new(()),
            index_dir,
        })
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model.clone().ok_or_else(|| ApiError::unavailable("no model loaded; start the server with --checkpoint"))
    }

    pub fn gallery(&self) -> Option<Arc<Gallery>> {
        self.gallery.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Holds the build slot; `/index/build` answers 409 while the guard lives.
    pub fn lock_builds(&self) -> Option<tokio::sync::MutexGuard<'_, ()>> {
        self.building.try_lock().ok()
    }

    fn swap_gallery(&self, g: Gallery) {
        *self.gallery.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(g));
    }
}

fn check_shape(model: &kpr::model::KprModel, index: &GalleryIndex) -> kpr::Result<()> {
    let want = (model.num_embeddings(), model.config().embed_dim);
    if !index.is_empty() && index.shape() != want {
        return Err(kpr::Error::Invalid(format!(
            "index holds {:?} descriptors, the model produces {want:?}",
            index.shape()
        )));
    }
    Ok(())
}

pub fn load_gallery(dir: &Path) -> kpr::Result<Gallery> {
    let index = GalleryIndex::load(dir)?;
    let path = dir.join(SOURCE_FILE);
    let source = match fs::read_to_string(&path) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    Ok(Gallery { index, source })
}

/// Writes into a sibling directory, then renames it over `dir`.
pub fn persist_gallery(dir: &Path, g: &Gallery) -> kpr::Result<()> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "index".into());
    let staging = dir.with_file_name(format!("{name}.partial"));
    let old = dir.with_file_name(format!("{name}.old"));
    let io = |p: &Path, e| kpr::Error::io(p, e);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| io(&staging, e))?;
    }
    g.index.save(&staging)?;
    if let Some(src) = &g.source {
        let p = staging.join(SOURCE_FILE);
        fs::write(&p, serde_json::to_string_pretty(src)?).map_err(|e| io(&p, e))?;
    }
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| io(&old, e))?;
    }
    Ok(())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/embed", post(embed))
        .route("/retrieve", post(retrieve))
        .route("/index/build", post(build_index))
        .route("/gallery/{sample_id}/thumbnail", get(thumbnail))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

/// Descriptor of one request plus the model-size image it was computed on.
pub fn embed_request(model: &LoadedModel, req: &EmbedRequest, with_attention: bool) -> Result<(PartDescriptor, RgbImage), ApiError> {
    let img = api::decode_image(&req.image)?;
    let prompt = api::parse_prompt(req, img.height(), img.width())?;
    let cfg = model.model.config();
    let (img, prompt) = api::to_model_frame(&img, prompt, cfg.height, cfg.width);
    let mut out = model.model.describe(&[(&img, prompt.as_ref())], 1, with_attention)?;
    Ok((out.remove(0), img))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_loaded: state.model.is_some(),
        index_size: state.gallery().map(|g| g.index.len()),
    })
}

async fn embed(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<EmbedResponse>, ApiError> {
    let model = state.model()?;
    let req: EmbedRequest = api::parse_json(&body)?;
    let resp = blocking(move || {
        let (desc, img) = embed_request(&model, &req, true)?;
        let attention = desc
            .attention
            .as_ref()
            .ok_or_else(|| ApiError::internal("model returned no attention map".into()))?;
        Ok(EmbedResponse {
            attention: api::encode_png_base64(&overlay::render(&img, attention))?,
            k: desc.num_parts(),
            d: desc.dim(),
            f: desc.f,
            v: desc.v,
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn retrieve(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Vec<RetrievedItem>>, ApiError> {
    let model = state.model()?;
    let req: RetrieveRequest = api::parse_json(&body)?;
    let gallery = state.gallery().ok_or_else(|| ApiError::conflict("no gallery index; POST /index/build first"))?;
    if req.top_k == 0 {
        return Err(ApiError::bad_request("top_k must be at least 1".into()));
    }
    let items = blocking(move || {
        let (desc, _) = embed_request(&model, &req.query, false)?;
        let ranked = rank_gallery(&desc, &gallery.index)?;
        Ok(ranked
            .into_iter()
            .take(req.top_k)
            .map(|r| RetrievedItem {
                thumbnail_url: api::thumbnail_url(&r.sample_id),
                sample_id: r.sample_id,
                distance: r.distance,
                identity: r.identity,
            })
            .collect())
    })
    .await?;
    Ok(Json(items))
}

async fn build_index(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<BuildResponse>, ApiError> {
    let model = state.model()?;
    let req: BuildRequest = api::parse_json(&body)?;
    let split: SplitName = serde_json::from_value(serde_json::Value::String(req.split.clone()))
        .map_err(|_| ApiError::bad_request(format!("split: '{}' is not one of train, query, gallery", req.split)))?;
    let _guard = state
        .building
        .try_lock()
        .map_err(|_| ApiError::conflict("an index build is already in progress"))?;
    let root = PathBuf::from(&req.dataset_root);
    let dir = state.index_dir.clone().unwrap_or_else(|| root.join("index").join(split.as_str()));
    let gallery = blocking(move || {
        let (_, samples) = load_split(&root, split)?;
        let index = GalleryIndex::build(&model.model, &samples, EMBED_BATCH)?;
        let g = Gallery { index, source: Some(GallerySource { dataset_root: root, split }) };
        persist_gallery(&dir, &g)?;
        Ok(g)
    })
    .await?;
    let count = gallery.index.len();
    log::info!("built gallery index of {count} samples");
    state.swap_gallery(gallery);
    Ok(Json(BuildResponse { count }))
}

async fn thumbnail(State(state): State<Arc<AppState>>, UrlPath(sample_id): UrlPath<String>) -> Result<impl IntoResponse, ApiError> {
    let unknown = || ApiError::not_found(format!("unknown sample '{sample_id}'"));
    let gallery = state.gallery().ok_or_else(unknown)?;
    if gallery.index.get(&sample_id).is_none() {
        return Err(unknown());
    }
    let src = gallery
        .source
        .as_ref()
        .ok_or_else(|| ApiError::not_found("the loaded index records no dataset to read images from".into()))?;
    let path = image_path(&src.dataset_root, src.split, &sample_id);
    let png = blocking(move || {
        let img = image::open(&path).map_err(|e| ApiError::not_found(format!("{}: {e}", path.display())))?;
        api::encode_png(&img.to_rgb8())
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

pub fn load_state(opts: &ServeOptions) -> anyhow::Result<AppState> {
    let model = match &opts.checkpoint {
        Some(p) => Some(checkpoint::load(p, DType::F32)?),
        None => {
            log::warn!("no --checkpoint given; /embed, /retrieve and /index/build will answer 503");
            None
        }
    };
    Ok(AppState::new(model, opts.index.clone())?)
}

pub async fn serve(opts: ServeOptions) -> anyhow::Result<()> {
    let state = Arc::new(load_state(&opts)?);
    let addr: SocketAddr = format!("{}:{}", opts.host, opts.port).parse()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
