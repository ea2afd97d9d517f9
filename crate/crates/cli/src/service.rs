//! HTTP service over the store: image upload and display, fit jobs and
//! fitted-branch overlays.
//!
//! Handlers run concurrently; jobs run one at a time, first in first out,
//! on a single worker. The store and the job table sit behind one mutex.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use daxs_core::fit::FitResult;
use daxs_core::tracks::SeedCurves;
use daxs_core::SpectralImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crate::jobs::{execute, JobInputs, JobKind, JobRecord, JobStatus};
use crate::pipeline::{overlay_polylines, AnticrossingSpec, PipelineConfig, Polyline};
use crate::png::encode_png;
use crate::store::Store;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }

    fn not_found(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", detail)
    }

    fn internal(e: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.error, "detail": self.detail })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Full-resolution scans run to tens of megabytes of JSON.
const MAX_BODY_BYTES: usize = 256 << 20;

struct Shared {
    store: Store,
    jobs: BTreeMap<String, JobRecord>,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Mutex<Shared>>,
    queue: mpsc::UnboundedSender<String>,
}

impl AppState {
    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Opens the store, reloads job records and starts the worker on the
/// current runtime. Jobs left running by a previous process are marked
/// failed; queued ones run again.
pub fn app(data_dir: impl Into<PathBuf>) -> io::Result<Router> {
    let store = Store::open(data_dir)?;
    let (tx, rx) = mpsc::unbounded_channel();
    let mut jobs = BTreeMap::new();
    for mut rec in store.load_jobs()? {
        match rec.status {
            JobStatus::Queued => {
                let _ = tx.send(rec.job_id.clone());
            }
            JobStatus::Running => {
                rec.advance(JobStatus::Failed, now())
                    .expect("running jobs can fail");
                rec.error = Some("interrupted by a service restart".into());
                store.save_job(&rec)?;
            }
            JobStatus::Done | JobStatus::Failed => {}
        }
        jobs.insert(rec.job_id.clone(), rec);
    }
    let state = AppState {
        shared: Arc::new(Mutex::new(Shared { store, jobs })),
        queue: tx,
    };
    tokio::spawn(worker(state.clone(), rx));
    Ok(router(state))
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/images", post(upload_image))
        .route("/images/{id}", get(get_image))
        .route("/images/{id}/png", get(get_image_png))
        .route("/jobs", post(submit_job))
        .route("/jobs/{id}", get(get_job))
        .route("/fits/{id}/overlay", get(get_overlay))
        .route("/artifacts/{name}", get(get_artifact))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, data_dir: PathBuf) -> io::Result<()> {
    let app = app(data_dir)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn worker(state: AppState, mut rx: mpsc::UnboundedReceiver<String>) {
    while let Some(id) = rx.recv().await {
        let (store, rec) = {
            let mut sh = state.lock();
            let Some(rec) = sh.jobs.get_mut(&id) else {
                continue;
            };
            if rec.advance(JobStatus::Running, now()).is_err() {
                continue;
            }
            let rec = rec.clone();
            if let Err(e) = sh.store.save_job(&rec) {
                eprintln!("cannot persist job {id}: {e}");
            }
            (sh.store.clone(), rec)
        };
        let outcome = tokio::task::spawn_blocking(move || execute(&store, &rec))
            .await
            .unwrap_or_else(|e| Err(format!("job panicked: {e}")));
        let mut sh = state.lock();
        let Shared { store, jobs } = &mut *sh;
        let Some(rec) = jobs.get_mut(&id) else {
            continue;
        };
        let next = match outcome {
            Ok(result) => {
                rec.result = Some(result);
                JobStatus::Done
            }
            Err(e) => {
                rec.error = Some(e);
                JobStatus::Failed
            }
        };
        rec.advance(next, now()).expect("running jobs finish");
        if let Err(e) = store.save_job(rec) {
            eprintln!("cannot persist job {id}: {e}");
        }
    }
}

fn load_image(sh: &Shared, id: &str) -> ApiResult<(Vec<u8>, SpectralImage)> {
    let bytes = sh
        .store
        .image(id)
        .map_err(ApiError::internal)?
        .ok_or_else(|| ApiError::not_found(format!("no image {id}")))?;
    let text = std::str::from_utf8(&bytes).map_err(ApiError::internal)?;
    let img = SpectralImage::from_json(text).map_err(ApiError::internal)?;
    Ok((bytes, img))
}

async fn upload_image(
    State(state): State<AppState>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let text = std::str::from_utf8(&body)
        .map_err(|e| ApiError::bad_request(format!("body is not UTF-8: {e}")))?;
    SpectralImage::from_json(text).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let id = state
        .lock()
        .store
        .put_image(&body)
        .map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(json!({ "image_id": id }))))
}

async fn get_image(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = state.lock().store.image(&id).map_err(ApiError::internal)?;
    let bytes = bytes.ok_or_else(|| ApiError::not_found(format!("no image {id}")))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn get_image_png(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let (_, img) = load_image(&state.lock(), &id)?;
    let png = encode_png(&img).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_artifact(
    State(state): State<AppState>,
    Path(name): Path<String>,
) -> ApiResult<Response> {
    let bytes = state
        .lock()
        .store
        .artifact(&name)
        .map_err(ApiError::internal)?;
    let bytes = bytes.ok_or_else(|| ApiError::not_found(format!("no artifact {name}")))?;
    let kind = if name.ends_with(".csv") {
        "text/csv"
    } else {
        "application/json"
    };
    Ok(([(header::CONTENT_TYPE, kind)], bytes).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    kind: JobKind,
    #[serde(default)]
    image_id: Option<String>,
    /// Further images for kinds that take several scans.
    #[serde(default)]
    image_ids: Vec<String>,
    seeds: Value,
    #[serde(default)]
    config: Value,
}

fn object_or_empty(v: Value) -> Value {
    if v.is_null() {
        json!({})
    } else {
        v
    }
}

/// Parses and validates the kind-specific configuration and returns its
/// canonical serialization.
fn canonical_config(kind: JobKind, config: Value) -> Result<Vec<u8>, String> {
    let config = object_or_empty(config);
    let bytes = match kind {
        JobKind::Fit | JobKind::SignCompare => {
            let cfg: PipelineConfig =
                serde_json::from_value(config).map_err(|e| format!("config: {e}"))?;
            cfg.extraction
                .validate()
                .map_err(|e| format!("config: {e}"))?;
            cfg.fit.validate().map_err(|e| format!("config: {e}"))?;
            serde_json::to_vec(&cfg)
        }
        JobKind::AlignAverage => {
            let spec: AnticrossingSpec =
                serde_json::from_value(config).map_err(|e| format!("config: {e}"))?;
            spec.extraction
                .validate()
                .map_err(|e| format!("config: {e}"))?;
            serde_json::to_vec(&spec)
        }
    };
    bytes.map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct Submitted {
    job_id: String,
    status: JobStatus,
}

async fn submit_job(
    State(state): State<AppState>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Submitted>)> {
    let req: JobRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let seeds = SeedCurves::from_json(&req.seeds.to_string())
        .map_err(|e| ApiError::bad_request(format!("seeds: {e}")))?;
    let config = canonical_config(req.kind, req.config).map_err(ApiError::bad_request)?;
    let image_ids: Vec<String> = req.image_id.into_iter().chain(req.image_ids).collect();
    if image_ids.len() < req.kind.min_images() {
        return Err(ApiError::bad_request(format!(
            "{:?} jobs need at least {} image(s), got {}",
            req.kind,
            req.kind.min_images(),
            image_ids.len()
        )));
    }
    let mut sh = state.lock();
    for id in &image_ids {
        if sh.store.image(id).map_err(ApiError::internal)?.is_none() {
            return Err(ApiError::not_found(format!("no image {id}")));
        }
    }
    let seeds_doc = seeds.to_json().map_err(ApiError::internal)?;
    let inputs = JobInputs {
        image_ids,
        seeds: sh
            .store
            .put_artifact(seeds_doc.as_bytes(), "json")
            .map_err(ApiError::internal)?,
        config: sh
            .store
            .put_artifact(&config, "json")
            .map_err(ApiError::internal)?,
    };
    let rec = JobRecord::new(req.kind, inputs, now());
    if let Some(existing) = sh.jobs.get(&rec.job_id) {
        return Ok((
            StatusCode::OK,
            Json(Submitted {
                job_id: existing.job_id.clone(),
                status: existing.status,
            }),
        ));
    }
    sh.store.save_job(&rec).map_err(ApiError::internal)?;
    let out = Submitted {
        job_id: rec.job_id.clone(),
        status: rec.status,
    };
    sh.jobs.insert(rec.job_id.clone(), rec);
    state
        .queue
        .send(out.job_id.clone())
        .map_err(ApiError::internal)?;
    Ok((StatusCode::ACCEPTED, Json(out)))
}

#[derive(Debug, Serialize)]
struct JobView {
    job: JobRecord,
    /// Main output document once the job is done.
    result: Option<Value>,
}

async fn get_job(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<JobView>> {
    let sh = state.lock();
    let rec = sh
        .jobs
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no job {id}")))?;
    let result = match rec.primary_output() {
        Some(name) => {
            let bytes = sh
                .store
                .artifact(name)
                .map_err(ApiError::internal)?
                .ok_or_else(|| ApiError::internal("missing output"))?;
            Some(serde_json::from_slice(&bytes).map_err(ApiError::internal)?)
        }
        None => None,
    };
    Ok(Json(JobView { job: rec, result }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Overlay {
    pub job_id: String,
    pub image_id: String,
    pub polylines: Vec<Polyline>,
}

async fn get_overlay(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<Overlay>> {
    let sh = state.lock();
    let rec = sh
        .jobs
        .get(&id)
        .filter(|r| r.kind == JobKind::Fit)
        .ok_or_else(|| ApiError::not_found(format!("no fit job {id}")))?;
    if rec.status != JobStatus::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "not_ready",
            format!("fit job {id} is {:?}", rec.status),
        ));
    }
    let name = rec
        .primary_output()
        .ok_or_else(|| ApiError::internal("missing output"))?;
    let bytes = sh
        .store
        .artifact(name)
        .map_err(ApiError::internal)?
        .ok_or_else(|| ApiError::internal("missing output"))?;
    let fit: FitResult = serde_json::from_slice(&bytes).map_err(ApiError::internal)?;
    let image_id = rec.inputs.image_ids[0].clone();
    let (_, img) = load_image(&sh, &image_id)?;
    Ok(Json(Overlay {
        job_id: id,
        image_id,
        polylines: overlay_polylines(&fit, &img),
    }))
}
