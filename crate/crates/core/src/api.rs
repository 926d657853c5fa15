//! JSON bodies of the HTTP service. Shared by the server and the client so
//! both sides agree on the wire format.

use serde::{Deserialize, Serialize};

use crate::evaluation::QaExample;
use crate::llm::ScriptBook;
use crate::protocol::{QueryMode, Segment, SegmentKind};
use crate::retriever::SearchHit;
use crate::rollout::{QuestionRecord, RolloutConfig, RolloutTrace};
use crate::supervision::{SelectionConfig, SftSample};

pub const DEFAULT_PARALLELISM: usize = 8;

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

fn default_k() -> usize {
    crate::retriever::DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    /// Passages in the served index, when the backend is local.
    pub passages: Option<usize>,
    pub index_fingerprint: Option<String>,
    /// Model name of the configured chat backend, if any.
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub hits: Vec<SearchHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub question: String,
    #[serde(default)]
    pub mode: QueryMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResponse {
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseRequest {
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseResponse {
    pub segments: Vec<Segment>,
    /// Kinds with whitespace-only plain text dropped.
    pub kinds: Vec<SegmentKind>,
    pub answer: Option<String>,
}

/// Scripts replace the server's chat backend for the request when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRequest {
    pub questions: Vec<QuestionRecord>,
    #[serde(default)]
    pub config: RolloutConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripts: Option<ScriptBook>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub dataset_name: String,
    pub dataset: Vec<QaExample>,
    #[serde(default)]
    pub config: RolloutConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripts: Option<ScriptBook>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSide {
    #[serde(default)]
    pub config: RolloutConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripts: Option<ScriptBook>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRequest {
    pub dataset_name: String,
    pub dataset: Vec<QaExample>,
    pub a: CompareSide,
    pub b: CompareSide,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    pub predicted: Option<String>,
    pub gold: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub trace: RolloutTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub samples: Vec<SftSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectRequest {
    pub dataset: Vec<QaExample>,
    #[serde(default)]
    pub config: SelectionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripts: Option<ScriptBook>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRequest {
    pub dataset: Vec<QaExample>,
    #[serde(default)]
    pub config: RolloutConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripts: Option<ScriptBook>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// Stable machine-readable code, e.g. `parse_error`.
    pub code: String,
    pub message: String,
    /// Byte offset for transcript parse errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
}
