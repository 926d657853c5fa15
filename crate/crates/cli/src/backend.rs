//! Where episodes run: in this process against a local index or remote
//! retriever, or on a searchloop server.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;

use searchloop_client::Client;
use searchloop_core::llm::{ChatModel, ModelProvider, ScriptBook, SharedModel, ENV_ENDPOINT};
use searchloop_core::retriever::{Bm25Retriever, Index, RemoteRetriever, RemoteRetrieverConfig, Retriever};
use searchloop_core::rollout::{FrozenClock, RolloutEngine};

use crate::io;

#[derive(Debug, Args, Clone)]
pub struct BackendArgs {
    /// BM25 index file for in-process retrieval.
    #[arg(long, conflicts_with_all = ["server", "retriever_url"])]
    pub index: Option<PathBuf>,
    /// Remote retrieval endpoint speaking `{queries, k} -> {results}`.
    #[arg(long, conflicts_with = "server")]
    pub retriever_url: Option<String>,
    /// Run episodes on a searchloop server instead of in this process.
    #[arg(long)]
    pub server: Option<String>,
    /// Scripted model turns (JSON object: question -> turns). Without this,
    /// the chat backend configured through SEARCHLOOP_LLM_* is used.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Episodes in flight at once.
    #[arg(long, default_value_t = 8)]
    pub parallelism: usize,
    /// Record zero wall time so reports are byte-reproducible.
    #[arg(long)]
    pub frozen_clock: bool,
    /// Remote retriever timeout in seconds.
    #[arg(long, default_value_t = 30)]
    pub retriever_timeout: u64,
}

pub enum Backend {
    Local(RolloutEngine),
    Remote { client: Client, scripts: Option<ScriptBook> },
}

impl BackendArgs {
    pub fn scripts(&self) -> Result<Option<ScriptBook>> {
        self.script.as_deref().map(io::read_json).transpose()
    }

    fn retriever(&self) -> Result<Arc<dyn Retriever>> {
        if let Some(path) = &self.index {
            let index = Index::load(path).with_context(|| format!("cannot load index {}", path.display()))?;
            return Ok(Arc::new(Bm25Retriever::new(index)));
        }
        if let Some(url) = &self.retriever_url {
            let mut config = RemoteRetrieverConfig::new(url.clone());
            config.timeout = Duration::from_secs(self.retriever_timeout);
            return Ok(Arc::new(RemoteRetriever::new(config)?));
        }
        bail!("choose a retriever with --index, --retriever-url or --server")
    }

    pub fn engine_with(&self, scripts: Option<ScriptBook>) -> Result<RolloutEngine> {
        let models: Arc<dyn ModelProvider> = match scripts {
            Some(book) => Arc::new(book),
            None => {
                if std::env::var_os(ENV_ENDPOINT).is_none() {
                    bail!("no model: pass --script or set {ENV_ENDPOINT} and SEARCHLOOP_LLM_MODEL");
                }
                Arc::new(SharedModel(Arc::new(ChatModel::from_env()?)))
            }
        };
        let engine = RolloutEngine::new(self.retriever()?, models);
        Ok(if self.frozen_clock { engine.with_clock(Arc::new(FrozenClock)) } else { engine })
    }

    pub fn backend(&self) -> Result<Backend> {
        let scripts = self.scripts()?;
        match &self.server {
            Some(url) => Ok(Backend::Remote { client: Client::new(url)?, scripts }),
            None => Ok(Backend::Local(self.engine_with(scripts)?)),
        }
    }
}
