//! HTTP screening service.
//!
//! `POST /screen` and `POST /sanitize` take a JSON list of `{id, text}`
//! documents; `GET /health` reports the detector fingerprint and cache
//! stats. The model loads in the background: until it is ready every route
//! answers 503. Requests may arrive concurrently, but extraction runs on a
//! single worker thread that owns the scorer exclusively, fed by a bounded
//! queue.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::{mpsc, oneshot};

use super::{sanitize, screen, SanitizeConfig, SanitizeResult, ScreenCache, ScreenConfig, ScreenVerdict, Scorer};
use crate::corpus::Document;

/// Everything the worker needs to screen and sanitize.
pub struct ScreenEngine {
    pub scorer: Box<dyn Scorer>,
    pub cache: Option<ScreenCache>,
    pub screen_config: ScreenConfig,
    pub sanitize_config: SanitizeConfig,
}

enum Job {
    Screen(Vec<Document>, oneshot::Sender<Vec<ScreenVerdict>>),
    Sanitize(Vec<Document>, oneshot::Sender<Vec<SanitizeResult>>),
}

#[derive(Default)]
struct Stats {
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    cache_entries: AtomicU64,
}

/// Shared handle between the HTTP handlers and the worker.
#[derive(Clone)]
pub struct ServiceHandle {
    ready: Arc<AtomicBool>,
    fingerprint: Arc<OnceLock<String>>,
    jobs: mpsc::Sender<Job>,
    stats: Arc<Stats>,
}

impl ServiceHandle {
    pub fn is_ready(&self) -> bool {
        self.ready.load(Ordering::Acquire)
    }
}

/// Spawn the engine builder and worker thread. The returned handle serves
/// 503 until the builder finishes.
pub fn start_service<F>(build_engine: F, queue_depth: usize) -> ServiceHandle
where
    F: FnOnce() -> ScreenEngine + Send + 'static,
{
    let (tx, mut rx) = mpsc::channel::<Job>(queue_depth);
    let handle = ServiceHandle {
        ready: Arc::new(AtomicBool::new(false)),
        fingerprint: Arc::new(OnceLock::new()),
        jobs: tx,
        stats: Arc::new(Stats::default()),
    };
    let worker = handle.clone();
    std::thread::spawn(move || {
        let engine = build_engine();
        let _ = worker
            .fingerprint
            .set(engine.scorer.fingerprint().to_string());
        if let Some(cache) = &engine.cache {
            worker
                .stats
                .cache_entries
                .store(cache.entries() as u64, Ordering::Relaxed);
        }
        worker.ready.store(true, Ordering::Release);
        while let Some(job) = rx.blocking_recv() {
            match job {
                Job::Screen(docs, reply) => {
                    let verdicts = screen(
                        &docs,
                        engine.scorer.as_ref(),
                        engine.cache.as_ref(),
                        &engine.screen_config,
                    );
                    let hits = verdicts.iter().filter(|v| v.cache_hit).count() as u64;
                    worker.stats.cache_hits.fetch_add(hits, Ordering::Relaxed);
                    worker
                        .stats
                        .cache_misses
                        .fetch_add(verdicts.len() as u64 - hits, Ordering::Relaxed);
                    if let Some(cache) = &engine.cache {
                        worker
                            .stats
                            .cache_entries
                            .store(cache.entries() as u64, Ordering::Relaxed);
                    }
                    let _ = reply.send(verdicts);
                }
                Job::Sanitize(docs, reply) => {
                    let results = docs
                        .iter()
                        .map(|doc| {
                            sanitize(doc, engine.scorer.as_ref(), &engine.sanitize_config)
                                .unwrap_or_else(|err| {
                                    // Fail closed: an unsanitizable document
                                    // keeps nothing.
                                    log::warn!("sanitize failed on {}: {err}", doc.id);
                                    SanitizeResult {
                                        doc_id: doc.id.clone(),
                                        kept_text: String::new(),
                                        removed_spans: vec![(0, doc.text.len())],
                                        depth_used: 0,
                                    }
                                })
                        })
                        .collect();
                    let _ = reply.send(results);
                }
            }
        }
    });
    handle
}

#[derive(Debug, Deserialize)]
struct DocIn {
    id: String,
    text: String,
}

impl From<DocIn> for Document {
    fn from(d: DocIn) -> Self {
        Document {
            id: d.id,
            text: d.text,
            source: "http".into(),
            meta: Default::default(),
        }
    }
}

fn not_ready() -> Response {
    (
        StatusCode::SERVICE_UNAVAILABLE,
        Json(serde_json::json!({"status": "loading"})),
    )
        .into_response()
}

fn bad_request(reason: String) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(serde_json::json!({"error": reason})),
    )
        .into_response()
}

async fn health(State(state): State<ServiceHandle>) -> Response {
    if !state.is_ready() {
        return not_ready();
    }
    let body = serde_json::json!({
        "status": "ready",
        "model_fingerprint": state.fingerprint.get(),
        "cache": {
            "entries": state.stats.cache_entries.load(Ordering::Relaxed),
            "hits": state.stats.cache_hits.load(Ordering::Relaxed),
            "misses": state.stats.cache_misses.load(Ordering::Relaxed),
        },
    });
    (StatusCode::OK, Json(body)).into_response()
}

async fn screen_route(
    State(state): State<ServiceHandle>,
    payload: Result<Json<Vec<DocIn>>, JsonRejection>,
) -> Response {
    let Json(docs) = match payload {
        Ok(docs) => docs,
        Err(rejection) => return bad_request(rejection.to_string()),
    };
    if !state.is_ready() {
        return not_ready();
    }
    let docs: Vec<Document> = docs.into_iter().map(Into::into).collect();
    let (tx, rx) = oneshot::channel();
    if state.jobs.send(Job::Screen(docs, tx)).await.is_err() {
        return not_ready();
    }
    match rx.await {
        Ok(verdicts) => (StatusCode::OK, Json(verdicts)).into_response(),
        Err(_) => not_ready(),
    }
}

async fn sanitize_route(
    State(state): State<ServiceHandle>,
    payload: Result<Json<Vec<DocIn>>, JsonRejection>,
) -> Response {
    let Json(docs) = match payload {
        Ok(docs) => docs,
        Err(rejection) => return bad_request(rejection.to_string()),
    };
    if !state.is_ready() {
        return not_ready();
    }
    let docs: Vec<Document> = docs.into_iter().map(Into::into).collect();
    let (tx, rx) = oneshot::channel();
    if state.jobs.send(Job::Sanitize(docs, tx)).await.is_err() {
        return not_ready();
    }
    match rx.await {
        Ok(results) => (StatusCode::OK, Json(results)).into_response(),
        Err(_) => not_ready(),
    }
}

/// The service router; bind it with `axum::serve`.
pub fn router(handle: ServiceHandle) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/screen", post(screen_route))
        .route("/sanitize", post(sanitize_route))
        .with_state(handle)
}
