//! HTTP review service.
//!
//! One coordinator owns the pipeline state. Writes (corrections, iterations)
//! take the writer lock without waiting and answer 409 when it is held;
//! reads clone the last committed snapshot and never see a partial update.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/api/state` | | [`StateView`] |
//! | GET | `/api/progress` | | [`Progress`] |
//! | GET | `/api/review?status=&kind=` | | `[ReviewTask]` |
//! | GET | `/api/images` | | `[ImageListItem]` |
//! | GET | `/api/images/{id}` | | image bytes |
//! | GET | `/api/images/{id}/predictions` | | [`PredictionsView`] |
//! | POST | `/api/images/{id}/corrections` | `CorrectionPayload` | [`CorrectionResult`] |
//! | POST | `/api/iterate` | [`IterateRequest`] (optional) | [`IterateResult`], or 202 + [`Progress`] |
//!
//! Errors are `{"error": {"kind", "message", "fields"?}}` with 404 for unknown
//! ids, 422 for malformed payloads and 409 for stale iterations or a busy writer.

mod error;
pub mod views;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use loopseg_core::oracle::synthetic::SyntheticDataset;
use loopseg_core::oracle::Registry;
use loopseg_core::pipeline::{CheckpointDir, Convergence, CorrectionPayload, FieldError, Pipeline, ReviewKind, ReviewStatus};
use loopseg_core::{IterationState, ImageStatus};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tokio::sync::OwnedMutexGuard;
use tower_http::services::ServeDir;

pub use error::{ApiError, ErrorBody};
pub use views::*;

/// Where committed states are written.
pub struct Store {
    pub dir: CheckpointDir,
    /// Dataset path recorded in the checkpoint index.
    pub dataset: Option<String>,
}

pub struct Service {
    pipeline: Arc<Pipeline>,
    store: Option<Store>,
    image_root: Option<PathBuf>,
    snapshot: RwLock<Arc<IterationState>>,
    writer: Arc<tokio::sync::Mutex<()>>,
    progress: Mutex<Progress>,
}

impl Service {
    pub fn new(pipeline: Pipeline, state: IterationState, store: Option<Store>, image_root: Option<PathBuf>) -> Self {
        let progress = Progress {
            iteration: state.iteration,
            ..Default::default()
        };
        Self {
            pipeline: Arc::new(pipeline),
            store,
            image_root,
            snapshot: RwLock::new(Arc::new(state)),
            writer: Arc::new(tokio::sync::Mutex::new(())),
            progress: Mutex::new(progress),
        }
    }

    /// Resume the latest state of a checkpoint directory. The dataset comes
    /// from `dataset`, or else from the path recorded in the checkpoint.
    pub fn open(checkpoints: &Path, dataset: Option<&Path>, registry: &Registry) -> loopseg_core::Result<Self> {
        let dir = CheckpointDir::new(checkpoints);
        let (manifest, state) = dir.latest()?;
        let data_dir = match (dataset, &manifest.dataset) {
            (Some(d), _) => d.to_path_buf(),
            (None, Some(d)) => PathBuf::from(d),
            (None, None) => {
                return Err(loopseg_core::Error::Config(
                    "checkpoint records no dataset; pass one explicitly".into(),
                ))
            }
        };
        let ds = SyntheticDataset::load(&data_dir)?;
        let pipeline = Pipeline::from_dataset(manifest.config.clone(), &ds.manifest, Arc::new(ds.truth), registry)?;
        let store = Store {
            dir,
            dataset: manifest.dataset.clone(),
        };
        Ok(Self::new(pipeline, state, Some(store), Some(data_dir)))
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    /// The last committed state.
    pub fn snapshot(&self) -> Arc<IterationState> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn progress(&self) -> Progress {
        self.progress.lock().expect("progress lock").clone()
    }

    fn commit(&self, state: IterationState, outcome: Option<Convergence>) -> loopseg_core::Result<()> {
        if let Some(s) = &self.store {
            s.dir.save(&state, &self.pipeline.config, s.dataset.as_deref(), outcome)?;
        }
        let t = state.iteration;
        *self.snapshot.write().expect("snapshot lock") = Arc::new(state);
        self.progress.lock().expect("progress lock").iteration = t;
        Ok(())
    }

    fn claim_writer(&self) -> Result<OwnedMutexGuard<()>, ApiError> {
        self.writer.clone().try_lock_owned().map_err(|_| ApiError::busy())
    }

    fn correct(&self, payload: CorrectionPayload) -> Result<CorrectionResult, ApiError> {
        let state = self.snapshot();
        let img = self
            .pipeline
            .images
            .get(&payload.image_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown image {}", payload.image_id)))?;
        if let Some(t) = payload.iteration {
            if t != state.iteration {
                return Err(loopseg_core::Error::Conflict(format!(
                    "correction made against iteration {t}, state is at {}",
                    state.iteration
                ))
                .into());
            }
        }
        let errs = payload.field_errors(state.image(&img.id)?.boxes.len(), img);
        if !errs.is_empty() {
            return Err(ApiError::invalid(errs));
        }
        let next = self.pipeline.apply_corrections(&state, std::slice::from_ref(&payload))?;
        let st = next.image(&img.id)?;
        let result = CorrectionResult {
            iteration: next.iteration,
            tasks: next
                .review_queue
                .iter()
                .filter(|t| t.image_id == img.id)
                .cloned()
                .collect(),
            image: views::predictions(img, st, &next)?,
        };
        self.commit(next, None)?;
        Ok(result)
    }

    fn iterate_once(&self) -> loopseg_core::Result<IterateResult> {
        let state = self.snapshot();
        let next = self.pipeline.run_iteration(&state)?;
        let convergence = self.pipeline.check(&next);
        let outcome = (convergence != Convergence::Continue).then_some(convergence);
        let result = IterateResult {
            iteration: next.iteration,
            convergence,
            summary: next.summarize(),
        };
        self.commit(next, outcome)?;
        Ok(result)
    }

    fn state_view(&self) -> StateView {
        let s = self.snapshot();
        let summary = s.summarize();
        let n = summary.images.max(1) as f64;
        StateView {
            iteration: s.iteration,
            epsilon: s.epsilon,
            convergence: self.pipeline.check(&s),
            converged_fraction: summary.converged as f64 / n,
            target_fraction: self.pipeline.config.converged_fraction,
            history: s.history.clone(),
            summary,
        }
    }
}

pub type Shared = Arc<Service>;

/// API routes, plus the UI bundle under `/` when `static_dir` is given.
pub fn router(svc: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/state", get(get_state))
        .route("/api/progress", get(get_progress))
        .route("/api/review", get(get_review))
        .route("/api/images", get(list_images))
        .route("/api/images/{id}", get(get_image))
        .route("/api/images/{id}/predictions", get(get_predictions))
        .route("/api/images/{id}/corrections", post(post_corrections))
        .route("/api/iterate", post(post_iterate))
        .fallback(api_fallback)
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Bind and serve until the future is dropped.
pub async fn serve(addr: std::net::SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "review service listening");
    axum::serve(listener, app).await
}

async fn api_fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

async fn get_state(State(svc): State<Shared>) -> Json<StateView> {
    Json(svc.state_view())
}

async fn get_progress(State(svc): State<Shared>) -> Json<Progress> {
    Json(svc.progress())
}

#[derive(Deserialize)]
struct ReviewQuery {
    status: Option<String>,
    kind: Option<String>,
}

async fn get_review(
    State(svc): State<Shared>,
    Query(q): Query<ReviewQuery>,
) -> Result<Json<Vec<loopseg_core::pipeline::ReviewTask>>, ApiError> {
    let status: Option<ReviewStatus> = match q.status.as_deref() {
        None | Some("") | Some("all") => None,
        Some(s) => Some(s.parse().map_err(|e: loopseg_core::Error| {
            ApiError::invalid(vec![field("status", e.to_string())])
        })?),
    };
    let kind: Option<ReviewKind> = match q.kind.as_deref() {
        None | Some("") => None,
        Some(k) => Some(parse_enum(k).map_err(|m| ApiError::invalid(vec![field("kind", m)]))?),
    };
    let s = svc.snapshot();
    Ok(Json(
        s.review_queue
            .iter()
            .filter(|t| status.is_none_or(|st| t.status == st))
            .filter(|t| kind.is_none_or(|k| t.kind == k))
            .cloned()
            .collect(),
    ))
}

async fn list_images(State(svc): State<Shared>) -> Json<Vec<ImageListItem>> {
    let s = svc.snapshot();
    let items = svc
        .pipeline
        .images
        .values()
        .map(|img| {
            let st = s.per_image.get(&img.id);
            ImageListItem {
                id: img.id.clone(),
                width: img.width,
                height: img.height,
                split: img.split,
                status: st.map_or(ImageStatus::Auto, |x| x.status),
                boxes: st.map_or(0, |x| x.boxes.len()),
                delta: st.map_or(0.0, |x| x.delta),
                pending_review: s.has_pending(&img.id),
            }
        })
        .collect();
    Json(items)
}

async fn get_image(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let img = svc
        .pipeline
        .images
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image {id}")))?;
    let root = svc
        .image_root
        .as_ref()
        .ok_or_else(|| ApiError::not_found("service has no image directory"))?;
    if img.uri.is_empty() {
        return Err(ApiError::not_found(format!("image {id} has no file")));
    }
    let path = root.join(&img.uri);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::not_found(format!("image file {} missing", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn get_predictions(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<PredictionsView>, ApiError> {
    let img = svc
        .pipeline
        .images
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image {id}")))?;
    let s = svc.snapshot();
    let st = s.image(&id)?;
    Ok(Json(views::predictions(img, st, &s)?))
}

async fn post_corrections(
    State(svc): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<CorrectionResult>, ApiError> {
    if !svc.pipeline.images.contains_key(&id) {
        return Err(ApiError::not_found(format!("unknown image {id}")));
    }
    let mut payload: CorrectionPayload = parse_body(&body)?.unwrap_or_default();
    if payload.image_id.is_empty() {
        payload.image_id = id.clone();
    } else if payload.image_id != id {
        return Err(ApiError::invalid(vec![field(
            "image_id",
            format!("body names {}, path names {id}", payload.image_id),
        )]));
    }
    let guard = svc.claim_writer()?;
    let worker = svc.clone();
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        worker.correct(payload)
    })
    .await
    .map_err(join_error)?
    .map(Json)
}

async fn post_iterate(State(svc): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: IterateRequest = parse_body(&body)?.unwrap_or_default();
    let guard = svc.claim_writer()?;
    let target = {
        let mut p = svc.progress.lock().expect("progress lock");
        p.running = true;
        p.target_iteration = Some(p.iteration + 1);
        p.last_error = None;
        p.target_iteration
    };
    tracing::info!(?target, "iteration started");
    let worker = svc.clone();
    let job = tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let res = worker.iterate_once();
        let mut p = worker.progress.lock().expect("progress lock");
        p.running = false;
        p.target_iteration = None;
        p.completed_runs += 1;
        if let Err(e) = &res {
            p.last_error = Some(e.to_string());
        }
        res
    });
    if req.background {
        return Ok((StatusCode::ACCEPTED, Json(svc.progress())).into_response());
    }
    let res = job.await.map_err(join_error)??;
    Ok(Json(res).into_response())
}

fn field(name: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: name.into(),
        message: message.into(),
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

/// `None` for an empty body; 422 naming the offending location otherwise.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<Option<T>, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(None);
    }
    serde_json::from_slice(body).map(Some).map_err(|e| {
        let place = format!("body (line {}, column {})", e.line(), e.column());
        ApiError::invalid(vec![field(&place, e.to_string())])
    })
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown value {s:?}"))
}
