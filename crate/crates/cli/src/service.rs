//! Read-only HTTP search API over a single index.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use spanlight_core::trainer::read_params;
use spanlight_core::{
    search, select_spans, token_relevance, EmbedderConfig, Encoder, Error, HeadParams, Index, Result, SearchOptions,
    Span, Threshold,
};

pub const PARAMS_ENV: &str = "FGR_PARAMS";

#[derive(Clone, Debug, Serialize)]
pub struct ServiceConfig {
    pub index_dir: PathBuf,
    pub params: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub default_k: usize,
    pub default_threshold: Threshold,
    pub max_query_chars: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            index_dir: PathBuf::from("index"),
            params: None,
            host: "127.0.0.1".into(),
            port: 8080,
            default_k: 10,
            default_threshold: Threshold::default(),
            max_query_chars: 2000,
        }
    }
}

impl ServiceConfig {
    /// Applies the `FGR_PARAMS` override when set and non-empty.
    pub fn with_env_override(mut self) -> Self {
        if let Some(p) = std::env::var_os(PARAMS_ENV).filter(|p| !p.is_empty()) {
            self.params = Some(PathBuf::from(p));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.default_k == 0 || self.max_query_chars == 0 {
            return Err(Error::InvalidParameter("default k and max query length must be positive".into()));
        }
        Ok(())
    }
}

pub struct AppState {
    pub index: Index,
    pub head: Option<HeadParams>,
    pub config: ServiceConfig,
}

/// Opens the index, and the trained weights if configured. The weights must
/// match the index dimension and the projection it was built with.
pub fn load_state(config: ServiceConfig) -> Result<AppState> {
    config.validate()?;
    let manifest = spanlight_core::index::read_manifest(&config.index_dir)?;
    let (index, head) = match &config.params {
        Some(path) => {
            let weights = read_params(path)?;
            if weights.dim() != manifest.dim {
                return Err(Error::Shape {
                    op: "params vs index",
                    left: (weights.dim(), weights.hidden_dim()),
                    right: (manifest.dim, manifest.dim),
                });
            }
            let embedder: EmbedderConfig = manifest.embedder.clone();
            let encoder = Encoder::new(embedder).with_projection(weights.projection.clone())?;
            (Index::open_with(&config.index_dir, encoder)?, Some(weights.head))
        }
        None => (Index::open(&config.index_dir)?, None),
    };
    Ok(AppState { index, head, config })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub query: String,
    pub k: Option<usize>,
    pub threshold: Option<f32>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TokenOut {
    pub s: String,
    pub b: usize,
    pub e: usize,
    pub p: f32,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct HitOut {
    pub id: String,
    pub score: f32,
    pub text: String,
    pub tokens: Vec<TokenOut>,
    pub spans: Vec<Span>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchResponse {
    pub hits: Vec<HitOut>,
    pub latency_ms: f64,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::EmptyInput => Self::bad_request("empty_query", "query has no tokens"),
            Error::InvalidParameter(m) => Self::bad_request("invalid_parameter", m),
            other => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "internal",
                message: other.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

pub fn run_search(state: &AppState, req: &SearchRequest) -> std::result::Result<SearchResponse, ApiError> {
    if req.query.trim().is_empty() {
        return Err(ApiError::bad_request("empty_query", "query must not be empty"));
    }
    if req.query.chars().count() > state.config.max_query_chars {
        return Err(ApiError::bad_request(
            "query_too_long",
            format!("query exceeds {} characters", state.config.max_query_chars),
        ));
    }
    let k = req.k.unwrap_or(state.config.default_k);
    if k == 0 {
        return Err(ApiError::bad_request("invalid_k", "k must be >= 1"));
    }
    let threshold = match req.threshold {
        Some(t) => Threshold::new(t).map_err(|_| ApiError::bad_request("invalid_threshold", "threshold must lie in (0, 1)"))?,
        None => state.config.default_threshold,
    };

    let start = Instant::now();
    let opts = SearchOptions {
        k,
        head: state.head.as_ref(),
        threshold,
    };
    let hits = search(&state.index, &req.query, &opts)?;
    let query_emb = if state.head.is_none() {
        Some(state.index.encoder().encode(&req.query)?.1)
    } else {
        None
    };
    let mut out = Vec::with_capacity(hits.len());
    for hit in hits {
        let rec = &state.index.passages()[hit.passage];
        let (profile, spans) = match (hit.profile, hit.spans) {
            (Some(p), Some(s)) => (p, s),
            _ => {
                // headless: raw-embedding token relevance
                let q = query_emb.as_ref().expect("encoded when headless");
                let p = token_relevance(q, &rec.emb, None)?;
                let s = select_spans(&p, &rec.tok, threshold);
                (p, s)
            }
        };
        let tokens = rec
            .tok
            .tokens
            .iter()
            .zip(&profile.probs)
            .map(|(t, &p)| TokenOut {
                s: t.surface.clone(),
                b: t.start,
                e: t.end,
                p,
            })
            .collect();
        out.push(HitOut {
            id: hit.id,
            score: hit.score,
            text: rec.text().to_string(),
            tokens,
            spans,
        });
    }
    Ok(SearchResponse {
        hits: out,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "passages": state.index.len(), "h": state.index.dim()}))
}

async fn config(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let c = &state.config;
    Json(json!({
        "index_dir": c.index_dir,
        "params": c.params,
        "default_k": c.default_k,
        "default_threshold": c.default_threshold.value(),
        "max_query_chars": c.max_query_chars,
        "passages": state.index.len(),
        "h": state.index.dim(),
        "h2": state.head.as_ref().map(|h| h.hidden_dim()),
        "encoder_digest": state.index.manifest().encoder_digest,
    }))
}

async fn search_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: SearchRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ApiError::bad_request("invalid_json", e.to_string()).into_response(),
    };
    let result = tokio::task::spawn_blocking(move || run_search(&state, &req)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        }
        .into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/config", get(config))
        .route("/search", post(search_handler))
        .with_state(state)
}
