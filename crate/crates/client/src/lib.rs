//! Typed client for the searchloop HTTP service.
//!
//! ```no_run
//! # async fn demo() -> Result<(), searchloop_client::ClientError> {
//! let client = searchloop_client::Client::new("http://127.0.0.1:8080")?;
//! let hits = client.search("Arthur's Magazine", 3).await?;
//! println!("{}", hits[0].title);
//! # Ok(())
//! # }
//! ```

use std::time::Duration;

use reqwest::{StatusCode, Url};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use searchloop_core::api::*;
use searchloop_core::evaluation::{EvalReport, PairedReport};
use searchloop_core::protocol::QueryMode;
use searchloop_core::retriever::{RemoteRetrieverConfig, RetrieveRequest, RetrieveResponse, SearchHit};
use searchloop_core::rollout::{BatchOutcome, RolloutTrace};
use searchloop_core::supervision::{LossMask, Reward, SelectionOutcome, SftGeneration, SftSample};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid server URL `{0}`")]
    Url(String),
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status} ({code}): {message}")]
    Api { status: StatusCode, code: String, message: String, offset: Option<usize> },
}

#[derive(Debug, Clone)]
pub struct Client {
    base: Url,
    http: reqwest::Client,
}

impl Client {
    /// Rollouts against a real model can take minutes, so the default
    /// timeout is generous.
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

    pub fn new(base: &str) -> Result<Self, ClientError> {
        Self::with_timeout(base, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base: &str, timeout: Duration) -> Result<Self, ClientError> {
        let normalized = if base.ends_with('/') { base.to_string() } else { format!("{base}/") };
        let base = Url::parse(&normalized).map_err(|_| ClientError::Url(base.to_string()))?;
        let http = reqwest::Client::builder().timeout(timeout).build()?;
        Ok(Self { base, http })
    }

    pub fn base_url(&self) -> &Url {
        &self.base
    }

    /// Configuration for using this server as a remote retriever backend.
    pub fn retriever_config(&self) -> RemoteRetrieverConfig {
        RemoteRetrieverConfig::new(self.url("v1/retrieve").to_string())
    }

    fn url(&self, path: &str) -> Url {
        self.base.join(path).expect("static route joins onto a base URL")
    }

    async fn decode<T: DeserializeOwned>(response: reqwest::Response) -> Result<T, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response.json().await?);
        }
        let text = response.text().await.unwrap_or_default();
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => ClientError::Api {
                status,
                code: body.error.code,
                message: body.error.message,
                offset: body.error.offset,
            },
            Err(_) => ClientError::Api { status, code: "http_error".into(), message: text, offset: None },
        })
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::decode(self.http.post(self.url(path)).json(body).send().await?).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        Self::decode(self.http.get(self.url("health")).send().await?).await
    }

    pub async fn retrieve(&self, queries: &[String], k: usize) -> Result<RetrieveResponse, ClientError> {
        self.post("v1/retrieve", &RetrieveRequest { queries: queries.to_vec(), k }).await
    }

    pub async fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ClientError> {
        let response: SearchResponse = self.post("v1/search", &SearchRequest { query: query.into(), k }).await?;
        Ok(response.hits)
    }

    pub async fn prompt(&self, question: &str, mode: QueryMode) -> Result<String, ClientError> {
        let response: PromptResponse = self.post("v1/prompt", &PromptRequest { question: question.into(), mode }).await?;
        Ok(response.prompt)
    }

    pub async fn parse(&self, transcript: &str) -> Result<ParseResponse, ClientError> {
        self.post("v1/parse", &ParseRequest { transcript: transcript.into() }).await
    }

    pub async fn rollout(&self, request: &RolloutRequest) -> Result<BatchOutcome, ClientError> {
        self.post("v1/rollout", request).await
    }

    pub async fn evaluate(&self, request: &EvaluateRequest) -> Result<EvalReport, ClientError> {
        self.post("v1/evaluate", request).await
    }

    pub async fn compare(&self, request: &CompareRequest) -> Result<PairedReport, ClientError> {
        self.post("v1/compare", request).await
    }

    pub async fn reward(&self, predicted: Option<&str>, gold: &[String]) -> Result<Reward, ClientError> {
        self.post("v1/reward", &RewardRequest { predicted: predicted.map(str::to_string), gold: gold.to_vec() }).await
    }

    pub async fn mask(&self, trace: &RolloutTrace) -> Result<LossMask, ClientError> {
        self.post("v1/mask", &TraceRequest { trace: trace.clone() }).await
    }

    pub async fn segment(&self, trace: &RolloutTrace) -> Result<Vec<SftSample>, ClientError> {
        let response: SegmentResponse = self.post("v1/segment", &TraceRequest { trace: trace.clone() }).await?;
        Ok(response.samples)
    }

    pub async fn sft(&self, request: &SftRequest) -> Result<SftGeneration, ClientError> {
        self.post("v1/sft", request).await
    }

    pub async fn rl_select(&self, request: &SelectRequest) -> Result<SelectionOutcome, ClientError> {
        self.post("v1/rl-select", request).await
    }
}
