//! Passage retrieval: the [`Retriever`] contract plus two backends, a local
//! BM25 index and an HTTP adapter for any service that speaks the
//! `{queries, k} -> {results}` protocol (dense encoders, web search, or
//! another instance of this engine's server).

mod bm25;
mod remote;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{indexed_text, tokenize, Bm25Params, Index, Posting, DEFAULT_B, DEFAULT_K1};
pub use remote::{RemoteHit, RemoteRetriever, RemoteRetrieverConfig, RetrieveRequest, RetrieveResponse};

pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_MAX_PARALLEL_QUERIES: usize = 3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot index an empty passage store")]
    EmptyCorpus,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("a batch needs at least one query")]
    NoQueries,
    #[error("{got} queries exceed the parallel query cap of {cap}")]
    TooManyQueries { cap: usize, got: usize },
    #[error("retrieval transport error: {0}")]
    Transport(String),
    #[error("retrieval protocol error: {0}")]
    Protocol(String),
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub passage_id: String,
    pub title: String,
    pub body: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Hits aligned positionally with the queries that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub queries: Vec<String>,
    pub hits_per_query: Vec<Vec<SearchHit>>,
}

#[async_trait]
pub trait Retriever: Send + Sync {
    /// Per-query results must equal what a batch of one would return.
    async fn search_batch(&self, queries: &[String], k: usize) -> Result<BatchResult, RetrievalError>;

    async fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        let mut batch = self.search_batch(&[query.to_string()], k).await?;
        Ok(batch.hits_per_query.pop().unwrap_or_default())
    }
}

pub(crate) fn check_batch(queries: &[String], k: usize, cap: usize) -> Result<(), RetrievalError> {
    if queries.is_empty() {
        return Err(RetrievalError::NoQueries);
    }
    if queries.len() > cap {
        return Err(RetrievalError::TooManyQueries { cap, got: queries.len() });
    }
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    Ok(())
}

/// Local BM25 backend. Cloning shares the index.
#[derive(Debug, Clone)]
pub struct Bm25Retriever {
    index: Arc<Index>,
    max_parallel_queries: usize,
}

impl Bm25Retriever {
    pub fn new(index: Index) -> Self {
        Self::from_shared(Arc::new(index))
    }

    pub fn from_shared(index: Arc<Index>) -> Self {
        Self { index, max_parallel_queries: DEFAULT_MAX_PARALLEL_QUERIES }
    }

    pub fn with_max_parallel_queries(mut self, cap: usize) -> Self {
        self.max_parallel_queries = cap.max(1);
        self
    }

    pub fn max_parallel_queries(&self) -> usize {
        self.max_parallel_queries
    }

    pub fn index(&self) -> &Arc<Index> {
        &self.index
    }

    /// Synchronous batch search with the same cap checks as the async path.
    pub fn search_batch_blocking(&self, queries: &[String], k: usize) -> Result<BatchResult, RetrievalError> {
        check_batch(queries, k, self.max_parallel_queries)?;
        let hits_per_query = self.index.search_many(queries, k)?;
        Ok(BatchResult { queries: queries.to_vec(), hits_per_query })
    }
}

#[async_trait]
impl Retriever for Bm25Retriever {
    async fn search_batch(&self, queries: &[String], k: usize) -> Result<BatchResult, RetrievalError> {
        check_batch(queries, k, self.max_parallel_queries)?;
        let tasks: Vec<_> = queries
            .iter()
            .cloned()
            .map(|query| {
                let index = Arc::clone(&self.index);
                tokio::task::spawn_blocking(move || index.search(&query, k))
            })
            .collect();
        let mut hits_per_query = Vec::with_capacity(tasks.len());
        for joined in futures::future::join_all(tasks).await {
            let hits = joined.map_err(|e| RetrievalError::Transport(format!("search task failed: {e}")))??;
            hits_per_query.push(hits);
        }
        Ok(BatchResult { queries: queries.to_vec(), hits_per_query })
    }
}
