use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{check_batch, BatchResult, RetrievalError, Retriever, SearchHit, DEFAULT_MAX_PARALLEL_QUERIES};

/// Wire request of the remote retrieval protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub queries: Vec<String>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteHit {
    pub passage_id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
    pub score: f64,
}

/// Wire response: `results[i]` answers `queries[i]`, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub results: Vec<Vec<RemoteHit>>,
}

impl RetrieveResponse {
    pub fn from_batch(batch: &BatchResult) -> Self {
        let results = batch
            .hits_per_query
            .iter()
            .map(|hits| {
                hits.iter()
                    .map(|h| RemoteHit {
                        passage_id: h.passage_id.clone(),
                        title: h.title.clone(),
                        body: h.body.clone(),
                        score: h.score,
                    })
                    .collect()
            })
            .collect();
        Self { results }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteRetrieverConfig {
    /// Full URL of the retrieve endpoint.
    pub endpoint: String,
    pub timeout: Duration,
    pub max_parallel_queries: usize,
}

impl RemoteRetrieverConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            max_parallel_queries: DEFAULT_MAX_PARALLEL_QUERIES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteRetriever {
    config: RemoteRetrieverConfig,
    http: reqwest::Client,
}

impl RemoteRetriever {
    pub fn new(config: RemoteRetrieverConfig) -> Result<Self, RetrievalError> {
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| RetrievalError::Transport(e.to_string()))?;
        Ok(Self { config, http })
    }
}

#[async_trait]
impl Retriever for RemoteRetriever {
    async fn search_batch(&self, queries: &[String], k: usize) -> Result<BatchResult, RetrievalError> {
        check_batch(queries, k, self.config.max_parallel_queries)?;
        let request = RetrieveRequest { queries: queries.to_vec(), k };
        let response = self
            .http
            .post(&self.config.endpoint)
            .json(&request)
            .send()
            .await
            .map_err(|e| RetrievalError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            let message = format!("{status}: {body}");
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                RetrievalError::Transport(message)
            } else {
                RetrievalError::Protocol(message)
            });
        }
        let decoded: RetrieveResponse = response
            .json()
            .await
            .map_err(|e| RetrievalError::Protocol(format!("bad response body: {e}")))?;
        if decoded.results.len() != queries.len() {
            return Err(RetrievalError::Protocol(format!(
                "{} result lists for {} queries",
                decoded.results.len(),
                queries.len()
            )));
        }
        let hits_per_query = decoded
            .results
            .into_iter()
            .map(|hits| {
                hits.into_iter()
                    .take(k)
                    .enumerate()
                    .map(|(i, h)| SearchHit {
                        passage_id: h.passage_id,
                        title: h.title,
                        body: h.body,
                        score: h.score,
                        rank: i + 1,
                    })
                    .collect()
            })
            .collect();
        Ok(BatchResult { queries: queries.to_vec(), hits_per_query })
    }
}
