use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::{EntryBody, SealResponse, VerifyBody};
use crate::canonical::canonical_bytes;
use crate::digest::Digest;
use crate::log::{AdmissionError, LogError, LogHandle, LogReader, LogWriter};
use crate::verifier::{TrustAnchors, VerificationCache, Verifier, VerifyRequest};

/// Shared state behind the router.
#[derive(Clone)]
pub struct ServiceState {
    pub log: LogHandle,
    pub verifier: Arc<Verifier>,
    pub cache: Arc<VerificationCache>,
}

impl ServiceState {
    /// A verifier that trusts exactly what the log's admission policy trusts.
    pub fn new(log: LogHandle) -> Self {
        let trust = {
            let l = log.read();
            TrustAnchors {
                log_key: l.public_key(),
                producers: l.policy().producers.clone(),
                platforms: l.policy().platforms.clone(),
            }
        };
        Self::with_verifier(log, Verifier::new(trust))
    }

    pub fn with_verifier(log: LogHandle, verifier: Verifier) -> Self {
        ServiceState { log, verifier: Arc::new(verifier), cache: Arc::new(VerificationCache::new()) }
    }
}

struct Canonical<T>(StatusCode, T);

impl<T: Serialize> IntoResponse for Canonical<T> {
    fn into_response(self) -> Response {
        match canonical_bytes(&self.1) {
            Ok(body) => (self.0, [(header::CONTENT_TYPE, "application/json")], body).into_response(),
            Err(e) => ApiError(LogError::Unavailable(format!("response encoding: {e}"))).into_response(),
        }
    }
}

fn ok<T: Serialize>(v: T) -> Result<Canonical<T>, ApiError> {
    Ok(Canonical(StatusCode::OK, v))
}

struct ApiError(LogError);

impl From<LogError> for ApiError {
    fn from(e: LogError) -> Self {
        ApiError(e)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    message: String,
    #[serde(flatten)]
    error: &'a LogError,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            LogError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            LogError::NotFound(_) => StatusCode::NOT_FOUND,
            LogError::OutOfRange(_) => StatusCode::BAD_REQUEST,
            LogError::EmptyTree => StatusCode::CONFLICT,
            LogError::Rejected(AdmissionError::Duplicate(_)) => StatusCode::CONFLICT,
            LogError::Rejected(AdmissionError::Storage(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            LogError::Rejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let body = ErrorBody { message: self.0.to_string(), error: &self.0 };
        let bytes = canonical_bytes(&body).unwrap_or_else(|_| b"{}".to_vec());
        (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(LogError::Rejected(AdmissionError::Malformed(e.to_string()))))
}

fn parse_digest(s: &str) -> Result<Digest, ApiError> {
    s.parse().map_err(|e| ApiError(LogError::OutOfRange(format!("digest {s:?}: {e}"))))
}

#[derive(Deserialize)]
struct TreeQuery {
    tree: Option<u64>,
}

#[derive(Deserialize)]
struct InclusionQuery {
    tree: u64,
    index: u64,
    size: Option<u64>,
}

#[derive(Deserialize)]
struct ConsistencyQuery {
    tree: u64,
    old: u64,
    new: u64,
}

#[derive(Deserialize)]
struct LeafQuery {
    tree: u64,
    index: u64,
}

#[derive(Deserialize)]
struct GoldenQuery {
    artifact_id: Option<String>,
    digest: Option<String>,
}

#[derive(Serialize)]
struct KeyBody {
    public_key: crate::crypto::PublicKey,
}

type ApiResult<T> = Result<Canonical<T>, ApiError>;

async fn submit(State(s): State<ServiceState>, body: Bytes) -> ApiResult<crate::log::Submission> {
    let entry = parse_json::<EntryBody>(&body)?.into_entry();
    let sub = s.log.submit(entry)?;
    Ok(Canonical(StatusCode::CREATED, sub))
}

async fn entry(State(s): State<ServiceState>, Path(digest): Path<String>) -> ApiResult<crate::log::StoredEntry> {
    let d = parse_digest(&digest)?;
    ok(s.log.entry(&d)?.ok_or_else(|| LogError::NotFound(d.to_string()))?)
}

async fn leaf(State(s): State<ServiceState>, Query(q): Query<LeafQuery>) -> ApiResult<crate::log::LogEntry> {
    ok(s.log
        .entry_at(q.tree, q.index)?
        .ok_or_else(|| LogError::NotFound(format!("tree {} leaf {}", q.tree, q.index)))?)
}

async fn root(State(s): State<ServiceState>, Query(q): Query<TreeQuery>) -> ApiResult<crate::log::SignedRoot> {
    ok(s.log.signed_root(q.tree)?)
}

async fn roots(State(s): State<ServiceState>) -> ApiResult<Vec<crate::log::SignedRoot>> {
    ok(LogReader::signed_roots(&s.log)?)
}

async fn inclusion(
    State(s): State<ServiceState>,
    Query(q): Query<InclusionQuery>,
) -> ApiResult<crate::merkle::InclusionProof> {
    let size = match q.size {
        Some(n) => n,
        None => s.log.signed_root(Some(q.tree))?.tree_size,
    };
    ok(s.log.inclusion_proof(q.tree, q.index, size)?)
}

async fn consistency(
    State(s): State<ServiceState>,
    Query(q): Query<ConsistencyQuery>,
) -> ApiResult<crate::merkle::ConsistencyProof> {
    ok(s.log.consistency_proof(q.tree, q.old, q.new)?)
}

async fn goldens(
    State(s): State<ServiceState>,
    Query(q): Query<GoldenQuery>,
) -> ApiResult<Vec<crate::model::GoldenValue>> {
    match (q.artifact_id, q.digest) {
        (Some(id), None) => ok(s.log.goldens_for_artifact_id(&id)?),
        (None, Some(d)) => ok(s.log.goldens_for_digest(&parse_digest(&d)?)?),
        _ => Err(ApiError(LogError::OutOfRange("exactly one of artifact_id, digest".into()))),
    }
}

async fn producing(State(s): State<ServiceState>, Path(digest): Path<String>) -> ApiResult<Vec<Digest>> {
    ok(s.log.attestations_producing(&parse_digest(&digest)?)?)
}

async fn log_key(State(s): State<ServiceState>) -> ApiResult<KeyBody> {
    ok(KeyBody { public_key: s.log.log_public_key()? })
}

async fn seal(State(s): State<ServiceState>) -> ApiResult<SealResponse> {
    let (sealed, opened) = s.log.seal_and_chain()?;
    ok(SealResponse { sealed, opened })
}

async fn verify(State(s): State<ServiceState>, body: Bytes) -> Response {
    let req = match parse_json::<VerifyBody>(&body) {
        Ok(b) => b.into_request(),
        Err(e) => return e.into_response(),
    };
    let report = tokio::task::spawn_blocking(move || {
        s.verifier.verify_artifact(&req.subject, &req.expectation, &s.log, Some(&s.cache))
    })
    .await;
    match report {
        Ok(r) => Canonical(StatusCode::OK, r).into_response(),
        Err(e) => ApiError(LogError::Unavailable(e.to_string())).into_response(),
    }
}

async fn verify_batch(State(s): State<ServiceState>, body: Bytes) -> Response {
    let reqs: Vec<VerifyRequest> = match parse_json::<Vec<VerifyBody>>(&body) {
        Ok(b) => b.into_iter().map(VerifyBody::into_request).collect(),
        Err(e) => return e.into_response(),
    };
    let reports = tokio::task::spawn_blocking(move || s.verifier.verify_batch(&reqs, &s.log, Some(&s.cache))).await;
    match reports {
        Ok(r) => Canonical(StatusCode::OK, r).into_response(),
        Err(e) => ApiError(LogError::Unavailable(e.to_string())).into_response(),
    }
}

pub fn router(state: ServiceState) -> Router {
    let api = Router::new()
        .route("/entries", post(submit).get(leaf))
        .route("/entries/:digest", get(entry))
        .route("/root", get(root))
        .route("/roots", get(roots))
        .route("/proof/inclusion", get(inclusion))
        .route("/proof/consistency", get(consistency))
        .route("/goldens", get(goldens))
        .route("/producing/:digest", get(producing))
        .route("/log-key", get(log_key))
        .route("/seal", post(seal))
        .route("/verify", post(verify))
        .route("/verify/batch", post(verify_batch));
    Router::new().nest(super::API_PREFIX, api).with_state(state)
}

/// A server running on its own runtime thread. Dropping it shuts it down.
pub struct LogServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl LogServer {
    pub fn spawn(addr: SocketAddr, state: ServiceState) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("atlas-http".into()).spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async move {
                        let _ = rx.await;
                    })
                    .await
            })
        })?;
        Ok(LogServer { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for LogServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}
