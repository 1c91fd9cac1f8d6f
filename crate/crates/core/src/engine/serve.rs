//! HTTP/JSON scoring service.
//!
//! `POST /score` takes a user, candidates with bids, and `n`; it answers
//! with the snapshot version used and the top `n` winners by eCPM.
//! `GET /healthz` reports the current version. Every request reads the
//! latest snapshot once, so one response never mixes versions.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use super::{split_and_score, FrontEndQuery, Scorer, SplitPlan, Winner};
use crate::error::{Error, Result};
use crate::features::{AdContext, FeatureMap, UserContext};
use crate::training::{SnapshotBus, Versioned};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireUser {
    pub user_id: u32,
    pub features: FeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireAd {
    pub ad_id: u32,
    pub bid: f32,
    pub features: FeatureMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub user: WireUser,
    pub candidates: Vec<WireAd>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub version: u64,
    pub winners: Vec<Winner>,
}

impl ScoreRequest {
    pub fn to_query(&self, scorer: &dyn Scorer, request_id: u64) -> Result<FrontEndQuery> {
        let schema = scorer.feature_schema();
        let user = UserContext::from_map(schema, self.user.user_id, &self.user.features)?;
        let ads = self
            .candidates
            .iter()
            .map(|c| AdContext::from_map(schema, c.ad_id, &c.features))
            .collect::<Result<Vec<_>>>()?;
        let bids = self.candidates.iter().map(|c| c.bid).collect();
        FrontEndQuery::new(request_id, Arc::new(user), ads, bids, self.n)
    }
}

struct AppState<M> {
    bus: Arc<SnapshotBus<M>>,
    plan: SplitPlan,
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn healthz<M>(State(state): State<Arc<AppState<M>>>) -> Response
where
    M: Versioned + Send + Sync + 'static,
{
    Json(json!({ "status": "ok", "version": state.bus.version() })).into_response()
}

async fn score<M>(State(state): State<Arc<AppState<M>>>, body: Bytes) -> Response
where
    M: Scorer + Versioned + Send + Sync + 'static,
{
    let Some(model) = state.bus.latest() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model snapshot published yet");
    };
    let request: ScoreRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let plan = state.plan;
    let outcome = tokio::task::spawn_blocking(move || {
        let query = request.to_query(&*model, 0)?;
        let winners = split_and_score(&query, &*model, &plan)?;
        Ok::<_, Error>(ScoreResponse {
            version: model.snapshot_version(),
            winners,
        })
    })
    .await;
    match outcome {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(e @ (Error::InvalidArgument(_) | Error::IdOutOfRange { .. } | Error::UnknownGroup(_) | Error::Schema(_)))) => {
            error(StatusCode::BAD_REQUEST, e)
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

fn router<M>(bus: Arc<SnapshotBus<M>>, plan: SplitPlan) -> Router
where
    M: Scorer + Versioned + Send + Sync + 'static,
{
    Router::new()
        .route("/score", post(score::<M>))
        .route("/healthz", get(healthz::<M>))
        .with_state(Arc::new(AppState { bus, plan }))
}

/// A service running on its own thread; dropping it shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server exits.
    pub fn wait(mut self) -> Result<()> {
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| Error::Io(std::io::Error::other("server thread panicked")))?
                .map_err(Error::Io),
            None => Ok(()),
        }
    }

    pub fn stop(mut self) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves `bus` on a background
/// runtime with `threads` workers.
pub fn spawn_server<M>(bus: Arc<SnapshotBus<M>>, addr: &str, plan: SplitPlan, threads: usize) -> Result<ServerHandle>
where
    M: Scorer + Versioned + Send + Sync + 'static,
{
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(bus, plan);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(threads.max(1))
        .enable_all()
        .build()?;
    let thread = std::thread::Builder::new()
        .name("score-server".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        })?;
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
