//! HTTP suggestion service.
//!
//! `POST /generate` runs the keyword and decoding pipeline for one article,
//! `GET /health` reports readiness and artifact versions, `GET /log/stats`
//! summarizes the access log. Every `/generate` call appends one JSON line
//! to the access log before the response is sent; the article text itself
//! is stored only as a SHA-256 digest.

mod log;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use uuid::Uuid;

use headliner_core::corpus::{normalize_whitespace, word_count, Article, FilterBounds};
use headliner_core::decoder::DecodeConfig;
use headliner_core::pipeline::{GenerateOptions, Generator};

pub use log::{AccessLog, AccessLogRecord, LogError, LogStats};

pub const CLIENT_HEADER: &str = "x-client-id";
/// Correlation id of every `/generate` response; also in error bodies.
pub const REQUEST_ID_HEADER: &str = "x-request-id";

/// Short content hash used as an artifact version.
pub fn file_version(path: impl AsRef<Path>) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

struct Loaded {
    generator: Arc<Generator>,
    model_version: String,
    vocab_version: String,
}

pub struct AppState {
    loaded: RwLock<Option<Arc<Loaded>>>,
    log: Arc<AccessLog>,
    defaults: DecodeConfig,
    bounds: FilterBounds,
}

impl AppState {
    /// A service that answers 503 until [`AppState::install`] is called.
    pub fn new(log: AccessLog, defaults: DecodeConfig, bounds: FilterBounds) -> Arc<Self> {
        Arc::new(Self {
            loaded: RwLock::new(None),
            log: Arc::new(log),
            defaults,
            bounds,
        })
    }

    pub fn install(&self, generator: Generator, model_version: String, vocab_version: String) {
        let loaded = Loaded {
            generator: Arc::new(generator),
            model_version,
            vocab_version,
        };
        *self.loaded.write().expect("state lock poisoned") = Some(Arc::new(loaded));
    }

    fn current(&self) -> Option<Arc<Loaded>> {
        self.loaded.read().expect("state lock poisoned").clone()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestParams {
    pub r: Option<u32>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub beam_size: Option<usize>,
    pub n_best: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub text: String,
    #[serde(default)]
    pub params: RequestParams,
    #[serde(default)]
    pub pinned: Vec<String>,
    #[serde(default)]
    pub excluded: Vec<String>,
    #[serde(default)]
    pub published_at: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOut {
    pub title: String,
    pub score: f64,
    pub matched_keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordOut {
    pub surface: String,
    pub rank: u32,
    pub search_volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub candidates: Vec<CandidateOut>,
    pub keywords: Vec<KeywordOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub request_id: String,
}

fn effective_config(defaults: &DecodeConfig, p: &RequestParams) -> DecodeConfig {
    let mut c = defaults.clone();
    if let Some(r) = p.r {
        c.penalty.r = r;
    }
    if let Some(a) = p.alpha {
        c.penalty.alpha = a;
    }
    if let Some(b) = p.beta {
        c.penalty.beta = b;
    }
    if let Some(k) = p.beam_size {
        c.beam_size = k;
    }
    if let Some(n) = p.n_best {
        c.n_best = n;
    }
    c
}

struct Failure {
    status: StatusCode,
    message: String,
}

impl Failure {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

fn validate(
    state: &AppState,
    body: &[u8],
) -> Result<(GenerateRequest, DecodeConfig), Failure> {
    let req: GenerateRequest = serde_json::from_slice(body)
        .map_err(|e| Failure::new(StatusCode::BAD_REQUEST, format!("invalid request: {e}")))?;
    if req.text.trim().is_empty() {
        return Err(Failure::new(StatusCode::BAD_REQUEST, "text must not be empty"));
    }
    let config = effective_config(&state.defaults, &req.params);
    config
        .validate()
        .map_err(|e| Failure::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    if let Some(both) = req.pinned.iter().find(|p| req.excluded.contains(p)) {
        return Err(Failure::new(
            StatusCode::BAD_REQUEST,
            format!("keyword {both:?} is both pinned and excluded"),
        ));
    }
    let words = word_count(&req.text);
    if !state.bounds.accepts_body(words) {
        return Err(Failure::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "article has {words} words; expected {}..={}",
                state.bounds.min_body_words, state.bounds.max_body_words
            ),
        ));
    }
    Ok((req, config))
}

async fn generate(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let request_id = Uuid::new_v4().to_string();
    let client_id = headers
        .get(CLIENT_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("anonymous")
        .to_string();

    let outcome = match state.current() {
        None => Err(Failure::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded")),
        Some(loaded) => match validate(&state, &body) {
            Err(f) => Err(f),
            Ok((req, config)) => run(loaded, req, config).await,
        },
    };

    let parsed: Option<GenerateRequest> = serde_json::from_slice(&body).ok();
    let record = AccessLogRecord {
        timestamp: Utc::now(),
        request_id: request_id.clone(),
        client_id,
        text_sha256: parsed.as_ref().map(|r| text_digest(&r.text)),
        params: parsed.as_ref().map(|r| r.params.clone()).unwrap_or_default(),
        status: match &outcome {
            Ok(_) => 200,
            Err(f) => f.status.as_u16(),
        },
        candidates: outcome.as_ref().map_or(0, |r| r.candidates.len()),
    };
    let log = state.log.clone();
    let logged = tokio::task::spawn_blocking(move || log.append(&record)).await;
    if let Err(e) = logged.map_err(|e| e.to_string()).and_then(|r| r.map_err(|e| e.to_string())) {
        tracing::error!(%request_id, "access log write failed: {e}");
        return error_response(StatusCode::INTERNAL_SERVER_ERROR, "access log unavailable".into(), request_id);
    }

    let mut response = match outcome {
        Ok(resp) => (StatusCode::OK, Json(resp)).into_response(),
        Err(f) => error_response(f.status, f.message, request_id.clone()),
    };
    if let Ok(v) = HeaderValue::from_str(&request_id) {
        response.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    response
}

async fn run(
    loaded: Arc<Loaded>,
    req: GenerateRequest,
    config: DecodeConfig,
) -> Result<GenerateResponse, Failure> {
    let task = tokio::task::spawn_blocking(move || {
        // the article id only feeds imported keyword scores; keep it stable
        let article = Article {
            id: "request".to_string(),
            title: String::new(),
            text: normalize_whitespace(&req.text),
            department: None,
            published_at: req.published_at,
        };
        let opts = GenerateOptions {
            config,
            use_keywords: true,
            pinned: req.pinned,
            excluded: req.excluded,
        };
        loaded
            .generator
            .generate(&article, &opts)
            .map(|g| GenerateResponse {
                candidates: g
                    .candidates
                    .into_iter()
                    .map(|c| CandidateOut {
                        title: c.title,
                        score: c.score,
                        matched_keywords: c.matched_keywords,
                    })
                    .collect(),
                keywords: g
                    .keywords
                    .into_iter()
                    .map(|k| KeywordOut {
                        surface: k.candidate.surface,
                        rank: k.rank,
                        search_volume: k.candidate.search_volume,
                    })
                    .collect(),
            })
    });
    match task.await {
        Ok(Ok(resp)) => Ok(resp),
        Ok(Err(e)) => {
            tracing::error!("generation failed: {e}");
            Err(Failure::new(StatusCode::INTERNAL_SERVER_ERROR, format!("generation failed: {e}")))
        }
        Err(e) => {
            tracing::error!("generation task panicked: {e}");
            Err(Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "generation task failed"))
        }
    }
}

fn error_response(status: StatusCode, error: String, request_id: String) -> Response {
    (status, Json(ErrorBody { error, request_id })).into_response()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_version: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_version: Option<String>,
}

async fn health(State(state): State<Arc<AppState>>) -> (StatusCode, Json<Health>) {
    match state.current() {
        Some(l) => (
            StatusCode::OK,
            Json(Health {
                status: "ok".into(),
                model_version: Some(l.model_version.clone()),
                vocab_version: Some(l.vocab_version.clone()),
            }),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "initializing".into(),
                model_version: None,
                vocab_version: None,
            }),
        ),
    }
}

async fn log_stats(State(state): State<Arc<AppState>>) -> Response {
    let log = state.log.clone();
    match tokio::task::spawn_blocking(move || log.stats()).await {
        Ok(Ok(stats)) => (StatusCode::OK, Json(stats)).into_response(),
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), Uuid::new_v4().to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), Uuid::new_v4().to_string()),
    }
}

/// CORS for the editor page. No origins means any origin.
pub fn cors(origins: &[String]) -> CorsLayer {
    let base = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.is_empty() {
        return base.allow_origin(Any);
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    base.allow_origin(AllowOrigin::list(list))
}

pub fn router(state: Arc<AppState>, origins: &[String]) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/health", get(health))
        .route("/log/stats", get(log_stats))
        .layer(cors(origins))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>, origins: &[String]) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, origins)).await
}
