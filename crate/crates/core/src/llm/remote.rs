//! OpenAI-compatible `/chat/completions` backend.

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::{apply_stop_rules, GenerationRequest, GenerationResult, LanguageModel, LlmError, StopReason};
use crate::protocol::{parse_transcript, SegmentKind};

pub const ENV_ENDPOINT: &str = "SEARCHLOOP_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "SEARCHLOOP_LLM_API_KEY";
pub const ENV_MODEL: &str = "SEARCHLOOP_LLM_MODEL";
pub const ENV_TIMEOUT_SECS: &str = "SEARCHLOOP_LLM_TIMEOUT_SECS";
pub const ENV_MAX_RETRIES: &str = "SEARCHLOOP_LLM_MAX_RETRIES";
pub const ENV_MAX_IN_FLIGHT: &str = "SEARCHLOOP_LLM_MAX_IN_FLIGHT";
pub const ENV_TRANSCRIPT_MAPPING: &str = "SEARCHLOOP_LLM_TRANSCRIPT_MAPPING";

/// How the accumulated transcript is laid out as chat messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptMapping {
    /// One partial assistant message continued in place. Needs a server
    /// that honours `continue_final_message` (vLLM, SGLang).
    Continuation,
    /// Model text as assistant messages, information blocks as user messages.
    Turns,
}

#[derive(Debug, Clone)]
pub struct ChatModelConfig {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_in_flight: usize,
    pub mapping: TranscriptMapping,
}

impl ChatModelConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            max_in_flight: 16,
            mapping: TranscriptMapping::Continuation,
        }
    }

    pub fn from_env() -> Result<Self, LlmError> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let endpoint = var(ENV_ENDPOINT).ok_or_else(|| LlmError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| LlmError::Config(format!("{ENV_MODEL} is not set")))?;
        let mut config = Self::new(endpoint, model);
        config.api_key = var(ENV_API_KEY);
        let number = |name: &str| -> Result<Option<u64>, LlmError> {
            var(name)
                .map(|v| v.parse::<u64>().map_err(|e| LlmError::Config(format!("{name}: {e}"))))
                .transpose()
        };
        if let Some(secs) = number(ENV_TIMEOUT_SECS)? {
            config.timeout = Duration::from_secs(secs);
        }
        if let Some(n) = number(ENV_MAX_RETRIES)? {
            config.max_retries = n as u32;
        }
        if let Some(n) = number(ENV_MAX_IN_FLIGHT)? {
            config.max_in_flight = (n as usize).max(1);
        }
        if let Some(mapping) = var(ENV_TRANSCRIPT_MAPPING) {
            config.mapping = match mapping.as_str() {
                "continuation" => TranscriptMapping::Continuation,
                "turns" => TranscriptMapping::Turns,
                other => return Err(LlmError::Config(format!("{ENV_TRANSCRIPT_MAPPING}: unknown mapping `{other}`"))),
            };
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self { role: role.to_string(), content: content.into() }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
    finish_reason: Option<String>,
    /// vLLM reports the matched stop string here.
    #[serde(default)]
    stop_reason: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

#[derive(Clone)]
pub struct ChatModel {
    config: ChatModelConfig,
    http: reqwest::Client,
    slots: Arc<Semaphore>,
}

impl ChatModel {
    pub fn new(config: ChatModelConfig) -> Result<Self, LlmError> {
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        let slots = Arc::new(Semaphore::new(config.max_in_flight.max(1)));
        Ok(Self { config, http, slots })
    }

    pub fn from_env() -> Result<Self, LlmError> {
        Self::new(ChatModelConfig::from_env()?)
    }

    pub fn config(&self) -> &ChatModelConfig {
        &self.config
    }

    pub fn messages(&self, request: &GenerationRequest) -> Vec<ChatMessage> {
        let mut messages = vec![ChatMessage::new("system", request.prompt())];
        let transcript = request.transcript();
        if transcript.is_empty() {
            return messages;
        }
        match self.config.mapping {
            TranscriptMapping::Continuation => messages.push(ChatMessage::new("assistant", transcript)),
            TranscriptMapping::Turns => {
                let segments = parse_transcript(transcript).unwrap_or_default();
                let mut assistant = String::new();
                for segment in &segments {
                    if segment.kind == SegmentKind::Information {
                        if !assistant.is_empty() {
                            messages.push(ChatMessage::new("assistant", std::mem::take(&mut assistant)));
                        }
                        messages.push(ChatMessage::new("user", segment.rendered()));
                    } else {
                        assistant.push_str(&segment.rendered());
                    }
                }
                if segments.is_empty() {
                    assistant.push_str(transcript);
                }
                if !assistant.is_empty() {
                    messages.push(ChatMessage::new("assistant", assistant));
                }
            }
        }
        messages
    }

    fn body(&self, request: &GenerationRequest) -> Value {
        let messages = self.messages(request);
        let continuing = messages.last().is_some_and(|m| m.role == "assistant");
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "stop": request.stop_sequences,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if continuing {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        body
    }

    async fn attempt(&self, body: &Value) -> Result<ChatResponse, (bool, String)> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut builder = self.http.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| (true, e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            let retryable = status.as_u16() == 429 || status.is_server_error();
            return Err((retryable, format!("HTTP {status}: {text}")));
        }
        response
            .json::<ChatResponse>()
            .await
            .map_err(|e| (false, format!("malformed completion: {e}")))
    }
}

/// Servers drop the matched stop string from the content; put it back so the
/// transcript keeps its close tag.
fn restore_stop(text: String, choice: &ChatChoice, stops: &[String]) -> (String, StopReason) {
    match choice.finish_reason.as_deref() {
        Some("length") => return (text, StopReason::Length),
        Some("stop") => {}
        _ => return (text, StopReason::EndOfMessage),
    }
    if let Some(stop) = stops.iter().find(|s| text.ends_with(s.as_str())) {
        return (text.clone(), StopReason::StopSequence(stop.clone()));
    }
    let reported = match &choice.stop_reason {
        Some(Value::String(s)) if stops.contains(s) => Some(s.clone()),
        _ => None,
    };
    let inferred = reported.or_else(|| {
        let last = parse_transcript(&text).ok()?.pop()?;
        let close = last.kind.close_tag();
        (!last.complete && stops.iter().any(|s| s == close)).then(|| close.to_string())
    });
    match inferred {
        Some(stop) => (format!("{text}{stop}"), StopReason::StopSequence(stop)),
        None => (text, StopReason::EndOfMessage),
    }
}

#[async_trait]
impl LanguageModel for ChatModel {
    async fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError> {
        request.validate()?;
        let _slot = self.slots.acquire().await.map_err(|e| LlmError::Config(e.to_string()))?;
        let body = self.body(request);
        let started = Instant::now();
        let mut backoff = self.config.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body).await {
                Ok(response) => {
                    let choice = response
                        .choices
                        .into_iter()
                        .next()
                        .ok_or_else(|| LlmError::Protocol("completion has no choices".into()))?;
                    let content = choice.message.content.clone().unwrap_or_default();
                    let (text, reason) = restore_stop(content, &choice, &request.stop_sequences);
                    // The server may ignore `stop`; enforce it here too.
                    let (text, enforced) = apply_stop_rules(&text, &request.stop_sequences, usize::MAX);
                    let stop_reason = match (&reason, enforced) {
                        (StopReason::Length, StopReason::EndOfMessage) => StopReason::Length,
                        (_, enforced @ StopReason::StopSequence(_)) => enforced,
                        (reason, _) => reason.clone(),
                    };
                    return Ok(GenerationResult { text, stop_reason, latency: started.elapsed().as_secs_f64() });
                }
                Err((true, message)) if attempts <= self.config.max_retries => {
                    tracing::warn!(attempts, %message, "retrying chat completion");
                    tokio::time::sleep(backoff).await;
                    backoff = backoff.saturating_mul(2);
                }
                Err((true, message)) => return Err(LlmError::Transport { message, attempts }),
                Err((false, message)) => return Err(LlmError::Protocol(message)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn choice(finish: &str, stop_reason: Option<Value>) -> ChatChoice {
        ChatChoice {
            message: ChatResponseMessage { content: None },
            finish_reason: Some(finish.into()),
            stop_reason,
        }
    }

    fn stops() -> Vec<String> {
        vec!["</search>".into(), "</answer>".into()]
    }

    #[test]
    fn restores_reported_stop() {
        let (t, r) = restore_stop("<search> q ".into(), &choice("stop", Some(json!("</search>"))), &stops());
        assert_eq!(t, "<search> q </search>");
        assert_eq!(r, StopReason::StopSequence("</search>".into()));
    }

    #[test]
    fn infers_stop_from_open_tag() {
        let (t, r) = restore_stop("<think>x</think>\n<answer> Paris ".into(), &choice("stop", None), &stops());
        assert_eq!(t, "<think>x</think>\n<answer> Paris </answer>");
        assert_eq!(r, StopReason::StopSequence("</answer>".into()));
        let (t, r) = restore_stop("<think>x</think>".into(), &choice("stop", None), &stops());
        assert_eq!((t.as_str(), r), ("<think>x</think>", StopReason::EndOfMessage));
    }

    #[test]
    fn length_finish() {
        let (_, r) = restore_stop("<think> long".into(), &choice("length", None), &stops());
        assert_eq!(r, StopReason::Length);
    }

    fn request(transcript: &str) -> GenerationRequest {
        GenerationRequest {
            context: format!("PROMPT{transcript}"),
            prompt_len: 6,
            stop_sequences: stops(),
            max_new_tokens: 8,
            temperature: 0.7,
            seed: Some(3),
        }
    }

    #[test]
    fn turn_mapping_alternates_roles() {
        let mut config = ChatModelConfig::new("http://localhost:1/v1", "m");
        config.mapping = TranscriptMapping::Turns;
        let model = ChatModel::new(config).unwrap();
        let msgs = model.messages(&request("<search> a </search><information>\nD\n</information>\n<think>t</think>"));
        let roles: Vec<_> = msgs.iter().map(|m| m.role.as_str()).collect();
        assert_eq!(roles, vec!["system", "assistant", "user", "assistant"]);
        assert_eq!(msgs[0].content, "PROMPT");
        assert_eq!(msgs[2].content, "<information>\nD\n</information>");
    }

    #[test]
    fn continuation_mapping_sets_flags() {
        let model = ChatModel::new(ChatModelConfig::new("http://localhost:1/v1", "m")).unwrap();
        let body = model.body(&request("<think>t</think>"));
        assert_eq!(body["messages"].as_array().unwrap().len(), 2);
        assert_eq!(body["continue_final_message"], json!(true));
        assert_eq!(body["seed"], json!(3));
        let fresh = model.body(&request(""));
        assert!(fresh.get("continue_final_message").is_none());
    }
}
