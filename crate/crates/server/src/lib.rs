//! HTTP/JSON front end for the rollout engine.
//!
//! One process holds the index (or a remote retriever) and, optionally, a
//! chat-completion backend, and serves many clients. Requests may carry
//! their own scripts, in which case the episode runs against those instead
//! of the configured model.
//!
//! Routes:
//!
//! | method | path            | body                | response           |
//! |--------|-----------------|---------------------|--------------------|
//! | GET    | `/health`       |                     | `Health`           |
//! | POST   | `/v1/retrieve`  | `RetrieveRequest`   | `RetrieveResponse` |
//! | POST   | `/v1/search`    | `SearchRequest`     | `SearchResponse`   |
//! | POST   | `/v1/prompt`    | `PromptRequest`     | `PromptResponse`   |
//! | POST   | `/v1/parse`     | `ParseRequest`      | `ParseResponse`    |
//! | POST   | `/v1/rollout`   | `RolloutRequest`    | `BatchOutcome`     |
//! | POST   | `/v1/evaluate`  | `EvaluateRequest`   | `EvalReport`       |
//! | POST   | `/v1/compare`   | `CompareRequest`    | `PairedReport`     |
//! | POST   | `/v1/reward`    | `RewardRequest`     | `Reward`           |
//! | POST   | `/v1/mask`      | `TraceRequest`      | `LossMask`         |
//! | POST   | `/v1/segment`   | `TraceRequest`      | `SegmentResponse`  |
//! | POST   | `/v1/sft`       | `SftRequest`        | `SftGeneration`    |
//! | POST   | `/v1/rl-select` | `SelectRequest`     | `SelectionOutcome` |

mod error;

use std::future::Future;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, FromRequest, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};

use searchloop_core::api::*;
use searchloop_core::evaluation::{self, EvalReport, PairedReport};
use searchloop_core::llm::{LanguageModel, ModelProvider, ScriptBook, SharedModel};
use searchloop_core::protocol::{self, parse_transcript, structural_kinds};
use searchloop_core::retriever::{Bm25Retriever, Index, RetrieveRequest, RetrieveResponse, Retriever};
use searchloop_core::rollout::{BatchOutcome, Clock, MonotonicClock, RolloutEngine};
use searchloop_core::supervision::{
    self, exact_match, LossMask, Reward, SelectionOutcome, SftGeneration,
};

pub use error::ApiError;

/// Datasets and traces can be large; the axum default of 2 MiB is not enough.
pub const BODY_LIMIT: usize = 256 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    retriever: Arc<dyn Retriever>,
    passages: Option<usize>,
    fingerprint: Option<String>,
    model: Option<(String, Arc<dyn LanguageModel>)>,
    clock: Arc<dyn Clock>,
}

impl AppState {
    pub fn new(retriever: Arc<dyn Retriever>) -> Self {
        Self { retriever, passages: None, fingerprint: None, model: None, clock: Arc::new(MonotonicClock::default()) }
    }

    /// Serve a local BM25 index.
    pub fn from_index(index: Index) -> Self {
        let passages = index.len();
        let fingerprint = index.fingerprint();
        let mut state = Self::new(Arc::new(Bm25Retriever::new(index)));
        state.passages = Some(passages);
        state.fingerprint = Some(fingerprint);
        state
    }

    pub fn with_model(mut self, name: impl Into<String>, model: Arc<dyn LanguageModel>) -> Self {
        self.model = Some((name.into(), model));
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    fn engine(&self, scripts: Option<ScriptBook>) -> Result<RolloutEngine, ApiError> {
        let models: Arc<dyn ModelProvider> = match (scripts, &self.model) {
            (Some(book), _) => Arc::new(book),
            (None, Some((_, model))) => Arc::new(SharedModel(Arc::clone(model))),
            (None, None) => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "no_model",
                    "no chat backend is configured; send `scripts` with the request",
                ))
            }
        };
        Ok(RolloutEngine::new(Arc::clone(&self.retriever), models).with_clock(Arc::clone(&self.clock)))
    }
}

/// `Json` whose rejections are reported as [`ApiError`] bodies.
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
struct Body<T>(T);

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/search", post(search))
        .route("/v1/prompt", post(prompt))
        .route("/v1/parse", post(parse))
        .route("/v1/rollout", post(rollout))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/compare", post(compare))
        .route("/v1/reward", post(reward))
        .route("/v1/mask", post(mask))
        .route("/v1/segment", post(segment))
        .route("/v1/sft", post(sft))
        .route("/v1/rl-select", post(rl_select))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        passages: state.passages,
        index_fingerprint: state.fingerprint.clone(),
        model: state.model.as_ref().map(|(name, _)| name.clone()),
    })
}

async fn retrieve(State(state): State<AppState>, Body(req): Body<RetrieveRequest>) -> ApiResult<RetrieveResponse> {
    let batch = state.retriever.search_batch(&req.queries, req.k).await?;
    Ok(Json(RetrieveResponse::from_batch(&batch)))
}

async fn search(State(state): State<AppState>, Body(req): Body<SearchRequest>) -> ApiResult<SearchResponse> {
    Ok(Json(SearchResponse { hits: state.retriever.search(&req.query, req.k).await? }))
}

async fn prompt(Body(req): Body<PromptRequest>) -> ApiResult<PromptResponse> {
    Ok(Json(PromptResponse { prompt: protocol::build_prompt(&req.question, req.mode)? }))
}

async fn parse(Body(req): Body<ParseRequest>) -> ApiResult<ParseResponse> {
    let segments = parse_transcript(&req.transcript)?;
    Ok(Json(ParseResponse {
        kinds: structural_kinds(&segments),
        answer: protocol::extract_answer(&segments),
        segments,
    }))
}

async fn rollout(State(state): State<AppState>, Body(req): Body<RolloutRequest>) -> ApiResult<BatchOutcome> {
    req.config.validate().map_err(ApiError::bad_request)?;
    let engine = state.engine(req.scripts)?;
    Ok(Json(engine.run_batch(&req.questions, &req.config, req.parallelism).await))
}

async fn evaluate(State(state): State<AppState>, Body(req): Body<EvaluateRequest>) -> ApiResult<EvalReport> {
    req.config.validate().map_err(ApiError::bad_request)?;
    let engine = state.engine(req.scripts)?;
    let report = evaluation::evaluate(&engine, &req.dataset_name, &req.dataset, &req.config, req.parallelism).await?;
    Ok(Json(report))
}

async fn compare(State(state): State<AppState>, Body(req): Body<CompareRequest>) -> ApiResult<PairedReport> {
    req.a.config.validate().map_err(ApiError::bad_request)?;
    req.b.config.validate().map_err(ApiError::bad_request)?;
    let engine_a = state.engine(req.a.scripts)?;
    let engine_b = state.engine(req.b.scripts)?;
    let paired = evaluation::compare_modes(
        &req.dataset_name,
        &req.dataset,
        (&engine_a, &req.a.config),
        (&engine_b, &req.b.config),
        req.parallelism,
    )
    .await?;
    Ok(Json(paired))
}

async fn reward(Body(req): Body<RewardRequest>) -> Json<Reward> {
    Json(exact_match(req.predicted.as_deref(), &req.gold))
}

async fn mask(Body(req): Body<TraceRequest>) -> ApiResult<LossMask> {
    Ok(Json(supervision::compute_loss_mask(&req.trace)?))
}

async fn segment(Body(req): Body<TraceRequest>) -> ApiResult<SegmentResponse> {
    Ok(Json(SegmentResponse { samples: supervision::segment_sft(&req.trace)? }))
}

async fn sft(State(state): State<AppState>, Body(req): Body<SftRequest>) -> ApiResult<SftGeneration> {
    req.config.validate().map_err(ApiError::bad_request)?;
    let engine = state.engine(req.scripts)?;
    Ok(Json(supervision::generate_sft(&engine, &req.dataset, &req.config, req.parallelism).await))
}

async fn rl_select(State(state): State<AppState>, Body(req): Body<SelectRequest>) -> ApiResult<SelectionOutcome> {
    if req.config.rollouts == 0 {
        return Err(ApiError::bad_request("rollouts must be at least 1"));
    }
    let engine = state.engine(req.scripts)?;
    Ok(Json(supervision::select_rl_data(&engine, &req.dataset, &req.config, req.parallelism).await))
}
