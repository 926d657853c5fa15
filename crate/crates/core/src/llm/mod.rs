//! Text generation behind one trait, with a scripted replay backend for
//! tests and pipeline simulation and a chat-completion HTTP backend for real
//! models.
//!
//! Every backend honours the same stop contract: output ends at the earliest
//! stop sequence (included), or after `max_new_tokens` words, or wherever the
//! model ended its message.

mod remote;
mod scripted;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use remote::{
    ChatModel, ChatModelConfig, TranscriptMapping, ENV_API_KEY, ENV_ENDPOINT, ENV_MAX_IN_FLIGHT, ENV_MAX_RETRIES, ENV_MODEL,
    ENV_TIMEOUT_SECS, ENV_TRANSCRIPT_MAPPING,
};
pub use scripted::{ScriptBook, ScriptEntry, ScriptedModel, WeightedScript};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("script exhausted after {turns} turns")]
    ScriptExhausted { turns: usize },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// System instruction followed by the transcript so far.
    pub context: String,
    /// Byte length of the instruction at the start of `context`.
    pub prompt_len: usize,
    pub stop_sequences: Vec<String>,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn prompt(&self) -> &str {
        &self.context[..self.prompt_len]
    }

    pub fn transcript(&self) -> &str {
        &self.context[self.prompt_len..]
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_new_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!("temperature {} is negative", self.temperature)));
        }
        if self.prompt_len > self.context.len() || !self.context.is_char_boundary(self.prompt_len) {
            return Err(LlmError::InvalidRequest("prompt_len is not a boundary of context".into()));
        }
        if self.stop_sequences.iter().any(String::is_empty) {
            return Err(LlmError::InvalidRequest("empty stop sequence".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "matched", rename_all = "snake_case")]
pub enum StopReason {
    StopSequence(String),
    Length,
    EndOfMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub stop_reason: StopReason,
    /// Seconds.
    pub latency: f64,
}

#[async_trait]
pub trait LanguageModel: Send + Sync {
    async fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError>;
}

/// Identifies one episode so a provider can hand out per-episode state.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeKey<'a> {
    pub question: &'a str,
    pub attempt: u32,
    pub seed: Option<u64>,
}

/// Supplies the model for each episode. Stateful backends (scripts) return a
/// fresh instance per episode; stateless ones share a single client.
pub trait ModelProvider: Send + Sync {
    fn model_for(&self, key: &EpisodeKey<'_>) -> Result<Arc<dyn LanguageModel>, LlmError>;
}

/// Hands every episode the same model.
#[derive(Clone)]
pub struct SharedModel(pub Arc<dyn LanguageModel>);

impl ModelProvider for SharedModel {
    fn model_for(&self, _key: &EpisodeKey<'_>) -> Result<Arc<dyn LanguageModel>, LlmError> {
        Ok(Arc::clone(&self.0))
    }
}

/// Cut `text` at the earliest stop sequence, then at `max_words`
/// whitespace-separated words, reporting why it ended.
pub fn apply_stop_rules(text: &str, stop_sequences: &[String], max_words: usize) -> (String, StopReason) {
    let earliest = stop_sequences
        .iter()
        .filter_map(|s| text.find(s.as_str()).map(|at| (at + s.len(), s)))
        .min_by_key(|&(end, _)| end);
    let (cut, reason) = match earliest {
        Some((end, stop)) => (&text[..end], StopReason::StopSequence(stop.clone())),
        None => (text, StopReason::EndOfMessage),
    };
    let limited = crate::protocol::truncate_words(cut, max_words);
    if cut.split_whitespace().count() > max_words {
        return (limited.to_string(), StopReason::Length);
    }
    (cut.to_string(), reason)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stops() -> Vec<String> {
        crate::protocol::STOP_SEQUENCES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn stops_at_earliest_sequence() {
        let (t, r) = apply_stop_rules("<search> q </search> trailing <answer>x</answer>", &stops(), 100);
        assert_eq!(t, "<search> q </search>");
        assert_eq!(r, StopReason::StopSequence("</search>".into()));
    }

    #[test]
    fn length_wins_when_words_run_out_first() {
        let (t, r) = apply_stop_rules("a b c d <answer>x</answer>", &stops(), 3);
        assert_eq!(t, "a b c");
        assert_eq!(r, StopReason::Length);
    }

    #[test]
    fn plain_end_of_message() {
        let (t, r) = apply_stop_rules("just text", &stops(), 10);
        assert_eq!((t.as_str(), r), ("just text", StopReason::EndOfMessage));
    }

    #[test]
    fn request_validation() {
        let mut req = GenerationRequest {
            context: "prompt".into(),
            prompt_len: 6,
            stop_sequences: stops(),
            max_new_tokens: 1,
            temperature: 0.7,
            seed: None,
        };
        assert!(req.validate().is_ok());
        req.max_new_tokens = 0;
        assert!(req.validate().is_err());
        req.max_new_tokens = 5;
        req.prompt_len = 7;
        assert!(req.validate().is_err());
    }
}
