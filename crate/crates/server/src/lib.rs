//! HTTP query service over a loaded cube snapshot.
//!
//! Handlers never hold a lock while querying: they clone the current
//! snapshot `Arc` and run the query on a blocking thread. Queries whose
//! size estimate exceeds `bulk_threshold` run on dedicated low-priority
//! threads so they cannot starve small interactive requests of CPU.

pub mod error;
pub mod params;
pub mod stress;

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::header::CONTENT_TYPE;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use flowcube_core::cube::{Cube, SubgraphResult, DEFAULT_MAX_ELEMENTS};
use flowcube_core::records::NodeRecord;
use serde::Serialize;
use tokio::sync::{oneshot, Semaphore};
use tower_http::compression::CompressionLayer;
use tower_http::cors::CorsLayer;

pub use error::ApiError;
use params::GraphParams;

pub const API_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_HARD_CAP: usize = 500_000;
pub const DEFAULT_BULK_THRESHOLD: usize = 20_000;

#[derive(Debug, Clone, Copy)]
pub struct ServiceConfig {
    pub max_elements: usize,
    pub hard_cap: usize,
    /// Estimated size above which a query runs on the low-priority lane.
    pub bulk_threshold: usize,
    pub bulk_lanes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_elements: DEFAULT_MAX_ELEMENTS,
            hard_cap: DEFAULT_HARD_CAP,
            bulk_threshold: DEFAULT_BULK_THRESHOLD,
            bulk_lanes: 4,
        }
    }
}

pub struct Loaded {
    pub cube: Cube,
    pub last_bucket: u64,
}

pub struct AppState {
    config: ServiceConfig,
    snapshot: RwLock<Option<Arc<Loaded>>>,
    bulk: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        AppState {
            config,
            snapshot: RwLock::new(None),
            bulk: Arc::new(Semaphore::new(config.bulk_lanes.max(1))),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Install a snapshot. In-flight requests finish on the previous one.
    pub fn swap(&self, cube: Cube) {
        let last_bucket = cube.max_bucket().unwrap_or(0);
        *self.snapshot.write().expect("snapshot lock") = Some(Arc::new(Loaded { cube, last_bucket }));
    }

    pub fn load(&self, path: &Path) -> flowcube_core::Result<()> {
        self.swap(Cube::load(path)?);
        Ok(())
    }

    pub fn current(&self) -> Result<Arc<Loaded>, ApiError> {
        self.snapshot.read().expect("snapshot lock").clone().ok_or(ApiError::Unavailable)
    }
}

#[derive(Serialize)]
pub struct GraphResponse {
    pub v: u32,
    #[serde(flatten)]
    pub result: SubgraphResult,
}

#[derive(Serialize)]
struct NodeDetail<'a> {
    v: u32,
    #[serde(flatten)]
    node: &'a NodeRecord,
    avg_tt: Option<f64>,
}

#[cfg(target_os = "linux")]
fn lower_thread_priority() {
    // per-thread nice value on Linux
    unsafe {
        let tid = libc::syscall(libc::SYS_gettid) as libc::id_t;
        libc::setpriority(libc::PRIO_PROCESS, tid, 19);
    }
}

#[cfg(not(target_os = "linux"))]
fn lower_thread_priority() {}

fn internal<E: std::fmt::Display>(e: E) -> ApiError {
    ApiError::Internal(e.to_string())
}

enum Plan {
    Done(Result<Vec<u8>, ApiError>),
    Bulk,
}

fn run_graph(loaded: &Loaded, q: &params::GraphQuery, max_elements: usize) -> Result<Vec<u8>, ApiError> {
    let result = loaded.cube.query_bbox(q.level, &q.bbox, q.from, q.to, max_elements)?;
    serde_json::to_vec(&GraphResponse { v: API_VERSION, result }).map_err(internal)
}

async fn graph(State(state): State<Arc<AppState>>, Query(p): Query<GraphParams>) -> Result<Response, ApiError> {
    let loaded = state.current()?;
    let q = p.resolve(&loaded.cube.header().bucketing, loaded.last_bucket)?;
    let cfg = *state.config();
    let l = loaded.clone();
    let plan = tokio::task::spawn_blocking(move || -> Result<Plan, ApiError> {
        l.cube.grid().check_level(q.level)?;
        let estimate = l.cube.estimate(q.level, &q.bbox)?;
        if estimate > cfg.hard_cap {
            return Err(ApiError::TooLarge { estimate, cap: cfg.hard_cap });
        }
        if estimate > cfg.bulk_threshold {
            return Ok(Plan::Bulk);
        }
        Ok(Plan::Done(run_graph(&l, &q, cfg.max_elements)))
    })
    .await
    .map_err(internal)??;
    let body = match plan {
        Plan::Done(body) => body?,
        Plan::Bulk => {
            let permit = state.bulk.clone().acquire_owned().await.map_err(internal)?;
            let (tx, rx) = oneshot::channel();
            std::thread::Builder::new()
                .name("bulk-query".into())
                .spawn(move || {
                    lower_thread_priority();
                    let _ = tx.send(run_graph(&loaded, &q, cfg.max_elements));
                    drop(permit);
                })
                .map_err(internal)?;
            rx.await.map_err(internal)??
        }
    };
    Ok(([(CONTENT_TYPE, "application/json")], body).into_response())
}

async fn meta(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let loaded = state.current()?;
    let cube = &loaded.cube;
    let grid = cube.grid();
    let cell_len_deg: Vec<f64> = (1..=grid.levels()).map(|l| grid.cell_len_deg(l)).collect::<Result<_, _>>()?;
    let header = cube.header();
    let counts = cube.counts();
    Ok(Json(serde_json::json!({
        "v": API_VERSION,
        "levels": grid.levels(),
        "grid": header.grid,
        "cell_len_deg": cell_len_deg,
        "bucketing": header.bucketing,
        "buckets": [0, loaded.last_bucket],
        "provenance": header.provenance,
        "counts": counts.per_level.iter().map(|(n, e)| serde_json::json!({"nodes": n, "edges": e})).collect::<Vec<_>>(),
        "max_response_elems": state.config().max_elements,
    }))
    .into_response())
}

async fn node(State(state): State<Arc<AppState>>, UrlPath((level, id)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let loaded = state.current()?;
    let level = level.parse::<u32>().map_err(|_| ApiError::BadRequest(format!("bad level `{level}`")))?;
    let id = id.parse::<u64>().map_err(|_| ApiError::BadRequest(format!("bad node id `{id}`")))?;
    let node = loaded.cube.node_detail(level, id)?;
    Ok(Json(NodeDetail { v: API_VERSION, node, avg_tt: node.avg_travel_time() }).into_response())
}

async fn access_log(req: Request, next: Next) -> Response {
    let started = Instant::now();
    let method = req.method().clone();
    let uri = req.uri().clone();
    let resp = next.run(req).await;
    log::info!(
        target: "access",
        "{method} {uri} {} {}us",
        resp.status().as_u16(),
        started.elapsed().as_micros()
    );
    resp
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/graph", get(graph))
        .route("/api/node/:level/:id", get(node))
        .layer(middleware::from_fn(access_log))
        .layer(CompressionLayer::new())
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Bind `addr` and serve in the background until `shutdown` fires.
pub async fn spawn(
    addr: SocketAddr,
    state: Arc<AppState>,
) -> std::io::Result<(SocketAddr, oneshot::Sender<()>, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(serve(listener, state, async {
        let _ = rx.await;
    }));
    Ok((local, tx, handle))
}
