//! The reason → search → read episode loop.
//!
//! Each round the model generates until `</search>` or `</answer>`. A closed
//! search is split into queries, retrieved, and the formatted information
//! block is appended to the transcript before the next round. The episode
//! ends on a closed answer, when a new search would exceed the retrieval
//! cap, when the model runs out of tokens, or on a protocol violation.

use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{EpisodeKey, GenerationRequest, LanguageModel, LlmError, ModelProvider, StopReason};
use crate::protocol::{
    self, build_prompt, extract_queries, format_information, parse_transcript, render_segments,
    InformationBlock, QueryMode, Segment, SegmentKind, DEFAULT_WORD_CAP_PER_QUERY, STOP_SEQUENCES,
};
use crate::retriever::{RetrievalError, Retriever, DEFAULT_TOP_K};

pub const DEFAULT_MAX_RETRIEVALS: usize = 4;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 1024;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub mode: QueryMode,
    /// Passages retrieved per query.
    pub k: usize,
    pub max_retrievals: usize,
    pub max_new_tokens_per_round: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub word_cap_per_query: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            mode: QueryMode::Single,
            k: DEFAULT_TOP_K,
            max_retrievals: DEFAULT_MAX_RETRIEVALS,
            max_new_tokens_per_round: DEFAULT_MAX_NEW_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            seed: None,
            word_cap_per_query: DEFAULT_WORD_CAP_PER_QUERY,
        }
    }
}

impl RolloutConfig {
    pub fn multi() -> Self {
        Self { mode: QueryMode::multi(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if self.max_new_tokens_per_round == 0 {
            return Err("max_new_tokens_per_round must be at least 1".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature {} is negative", self.temperature));
        }
        if let QueryMode::Multi { max_parallel_queries: 0 } = self.mode {
            return Err("max_parallel_queries must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    ModelGenerated,
    Injected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    RetrievalCapReached,
    ScriptExhausted,
    ProtocolViolation,
    LengthExceeded,
    /// Transport or configuration failure; see `RolloutTrace::error`.
    Failed,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Self::Answered => "answered",
            Self::RetrievalCapReached => "retrieval_cap_reached",
            Self::ScriptExhausted => "script_exhausted",
            Self::ProtocolViolation => "protocol_violation",
            Self::LengthExceeded => "length_exceeded",
            Self::Failed => "failed",
        }
    }
}

/// One question with a caller-chosen id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub id: String,
    pub question: String,
    pub mode: QueryMode,
    pub prompt: String,
    /// Segments of the transcript that follows the prompt.
    pub segments: Vec<Segment>,
    pub origins: Vec<Origin>,
    pub retrieval_count: usize,
    pub warnings: Vec<String>,
    pub termination: Termination,
    /// Seconds.
    pub wall_time: f64,
    pub final_answer: Option<String>,
    /// Model output that was refused and left out of the transcript.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub retrieval_count: usize,
    pub wall_time: f64,
    pub answered: bool,
}

/// Arithmetic means over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub episodes: usize,
    pub mean_retrieval_count: f64,
    pub mean_wall_time: f64,
    pub answered_fraction: f64,
}

impl BatchMetrics {
    pub fn from_traces(traces: &[RolloutTrace]) -> Self {
        let n = traces.len();
        if n == 0 {
            return Self::default();
        }
        let sum = |f: &dyn Fn(&RolloutTrace) -> f64| traces.iter().map(f).sum::<f64>() / n as f64;
        Self {
            episodes: n,
            mean_retrieval_count: sum(&|t| t.retrieval_count as f64),
            mean_wall_time: sum(&|t| t.wall_time),
            answered_fraction: sum(&|t| f64::from(u8::from(t.termination == Termination::Answered))),
        }
    }
}

impl RolloutTrace {
    /// The post-prompt transcript.
    pub fn transcript(&self) -> String {
        render_segments(&self.segments)
    }

    pub fn metrics(&self) -> EpisodeMetrics {
        EpisodeMetrics {
            retrieval_count: self.retrieval_count,
            wall_time: self.wall_time,
            answered: self.termination == Termination::Answered,
        }
    }

    /// Everything the model emitted, in order, with tags.
    pub fn model_output(&self) -> String {
        self.segments
            .iter()
            .zip(&self.origins)
            .filter(|(_, o)| **o == Origin::ModelGenerated)
            .map(|(s, _)| s.rendered())
            .collect()
    }

    pub fn information_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Information)
    }

    /// Structural invariants every engine-built trace satisfies.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.segments.len() != self.origins.len() {
            return Err("segments and origins differ in length".into());
        }
        let infos = self.information_segments().count();
        if infos != self.retrieval_count {
            return Err(format!("{} information segments but retrieval_count {}", infos, self.retrieval_count));
        }
        for (i, (segment, origin)) in self.segments.iter().zip(&self.origins).enumerate() {
            let expected = if segment.kind == SegmentKind::Information { Origin::Injected } else { Origin::ModelGenerated };
            if *origin != expected {
                return Err(format!("segment {i} has origin {origin:?}"));
            }
            if segment.kind == SegmentKind::Information {
                let preceded = i > 0 && self.segments[i - 1].is_closed(SegmentKind::Search);
                if !preceded {
                    return Err(format!("information segment {i} does not follow a closed search"));
                }
            }
        }
        let mut cursor = 0;
        for segment in &self.segments {
            if segment.span.0 != cursor || segment.span.1 < segment.span.0 {
                return Err(format!("segment span {:?} does not start at {cursor}", segment.span));
            }
            cursor = segment.span.1;
        }
        let transcript = self.transcript();
        if parse_transcript(&transcript).as_ref() != Ok(&self.segments) {
            return Err("transcript does not re-parse to the recorded segments".into());
        }
        if (self.termination == Termination::Answered) != self.final_answer.is_some() {
            return Err("final_answer must be present exactly when answered".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EpisodeFailure {
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
}

/// A failed episode with everything recorded up to the failure.
#[derive(Debug, Error)]
#[error("episode `{}` failed: {source}", trace.id)]
pub struct EpisodeError {
    pub trace: Box<RolloutTrace>,
    #[source]
    pub source: EpisodeFailure,
}

pub trait Clock: Send + Sync {
    /// Time since an arbitrary fixed origin.
    fn now(&self) -> Duration;
}

#[derive(Debug, Clone)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Always reads zero; makes reports byte-reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> Duration {
        Duration::ZERO
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub traces: Vec<RolloutTrace>,
    pub metrics: BatchMetrics,
}

#[derive(Clone)]
pub struct RolloutEngine {
    retriever: Arc<dyn Retriever>,
    models: Arc<dyn ModelProvider>,
    clock: Arc<dyn Clock>,
}

impl RolloutEngine {
    pub fn new(retriever: Arc<dyn Retriever>, models: Arc<dyn ModelProvider>) -> Self {
        Self { retriever, models, clock: Arc::new(MonotonicClock::default()) }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn retriever(&self) -> &Arc<dyn Retriever> {
        &self.retriever
    }

    pub fn models(&self) -> &Arc<dyn ModelProvider> {
        &self.models
    }

    pub async fn run_episode(&self, question: &str, cfg: &RolloutConfig) -> Result<RolloutTrace, EpisodeError> {
        self.run_attempt(question, question, cfg, 0).await
    }

    /// One episode; `attempt` distinguishes repeated rollouts of a question.
    pub async fn run_attempt(
        &self,
        id: &str,
        question: &str,
        cfg: &RolloutConfig,
        attempt: u32,
    ) -> Result<RolloutTrace, EpisodeError> {
        let started = self.clock.now();
        let mut trace = RolloutTrace {
            id: id.to_string(),
            question: question.to_string(),
            mode: cfg.mode,
            prompt: String::new(),
            segments: Vec::new(),
            origins: Vec::new(),
            retrieval_count: 0,
            warnings: Vec::new(),
            termination: Termination::Failed,
            wall_time: 0.0,
            final_answer: None,
            rejected_output: None,
            error: None,
        };
        let mut transcript = String::new();

        let outcome = match self.prepare(&mut trace, cfg, attempt) {
            Ok(model) => self.drive(&mut trace, &mut transcript, cfg, model.as_ref()).await,
            Err(e) => Err(e),
        };

        let segments = parse_transcript(&transcript);
        trace.wall_time = self.clock.now().saturating_sub(started).as_secs_f64();
        let outcome = outcome.and_then(|termination| Ok((termination, segments.clone()?)));
        match outcome {
            Ok((termination, segments)) => {
                trace.origins = origins_of(&segments);
                trace.segments = segments;
                trace.termination = termination;
                if termination == Termination::Answered {
                    trace.final_answer = protocol::extract_answer(&trace.segments);
                }
                Ok(trace)
            }
            Err(source) => {
                if let Ok(segments) = segments {
                    trace.origins = origins_of(&segments);
                    trace.segments = segments;
                }
                trace.termination = Termination::Failed;
                trace.error = Some(source.to_string());
                Err(EpisodeError { trace: Box::new(trace), source })
            }
        }
    }

    fn prepare(
        &self,
        trace: &mut RolloutTrace,
        cfg: &RolloutConfig,
        attempt: u32,
    ) -> Result<Arc<dyn LanguageModel>, EpisodeFailure> {
        cfg.validate().map_err(EpisodeFailure::Config)?;
        trace.prompt = build_prompt(&trace.question, cfg.mode)?;
        let key = EpisodeKey { question: &trace.question, attempt, seed: cfg.seed };
        Ok(self.models.model_for(&key)?)
    }

    async fn drive(
        &self,
        trace: &mut RolloutTrace,
        transcript: &mut String,
        cfg: &RolloutConfig,
        model: &dyn LanguageModel,
    ) -> Result<Termination, EpisodeFailure> {
        let stop_sequences: Vec<String> = STOP_SEQUENCES.iter().map(|s| s.to_string()).collect();
        let mut round: u64 = 0;
        loop {
            let request = GenerationRequest {
                context: format!("{}{}", trace.prompt, transcript),
                prompt_len: trace.prompt.len(),
                stop_sequences: stop_sequences.clone(),
                max_new_tokens: cfg.max_new_tokens_per_round,
                temperature: cfg.temperature,
                seed: cfg.seed.map(|s| s.wrapping_add(round)),
            };
            round += 1;

            let output = match model.generate(&request).await {
                Ok(output) => output,
                Err(LlmError::ScriptExhausted { .. }) => return Ok(Termination::ScriptExhausted),
                Err(e) => return Err(e.into()),
            };

            let kind = SegmentKind::Information;
            if output.text.contains(kind.open_tag()) || output.text.contains(kind.close_tag()) {
                trace.warnings.push("model emitted an information tag".into());
                trace.rejected_output = Some(output.text);
                return Ok(Termination::ProtocolViolation);
            }
            let chunk = match parse_transcript(&output.text) {
                Ok(chunk) => chunk,
                Err(e) => {
                    trace.warnings.push(format!("unparseable model output: {e}"));
                    trace.rejected_output = Some(output.text);
                    return Ok(Termination::ProtocolViolation);
                }
            };
            transcript.push_str(&output.text);
            let last = chunk.last();

            match output.stop_reason {
                StopReason::Length => return Ok(Termination::LengthExceeded),
                StopReason::EndOfMessage => {
                    if last.is_some_and(|s| s.is_closed(SegmentKind::Answer)) {
                        return Ok(Termination::Answered);
                    }
                    trace.warnings.push("model ended its turn without a search or an answer".into());
                    return Ok(Termination::ProtocolViolation);
                }
                StopReason::StopSequence(ref stop) if stop == SegmentKind::Answer.close_tag() => {
                    if last.is_some_and(|s| s.is_closed(SegmentKind::Answer)) {
                        return Ok(Termination::Answered);
                    }
                    trace.warnings.push("answer close tag without a matching answer".into());
                    return Ok(Termination::ProtocolViolation);
                }
                StopReason::StopSequence(ref stop) if stop == SegmentKind::Search.close_tag() => {
                    let Some(search) = last.filter(|s| s.is_closed(SegmentKind::Search)) else {
                        trace.warnings.push("search close tag without a matching search".into());
                        return Ok(Termination::ProtocolViolation);
                    };
                    if trace.retrieval_count >= cfg.max_retrievals {
                        trace.warnings.push(format!("retrieval cap of {} reached", cfg.max_retrievals));
                        return Ok(Termination::RetrievalCapReached);
                    }
                    let extracted = match extract_queries(&search.text, cfg.mode) {
                        Ok(extracted) => extracted,
                        Err(e) => {
                            trace.warnings.push(e.to_string());
                            return Ok(Termination::ProtocolViolation);
                        }
                    };
                    trace.warnings.extend(extracted.warnings);
                    let batch = self.retriever.search_batch(&extracted.queries, cfg.k).await?;
                    for (query, hits) in batch.queries.iter().zip(&batch.hits_per_query) {
                        if hits.is_empty() {
                            trace.warnings.push(format!("no results for query `{query}`"));
                        }
                    }
                    let block = InformationBlock::from_batch(&batch);
                    transcript.push_str(&format_information(&block, cfg.mode, cfg.word_cap_per_query));
                    trace.retrieval_count += 1;
                }
                StopReason::StopSequence(stop) => {
                    trace.warnings.push(format!("unexpected stop sequence `{stop}`"));
                    return Ok(Termination::ProtocolViolation);
                }
            }
        }
    }

    /// Runs episodes concurrently; traces come back in input order. Failed
    /// episodes are kept as traces with `Termination::Failed`.
    pub async fn run_batch(&self, questions: &[QuestionRecord], cfg: &RolloutConfig, parallelism: usize) -> BatchOutcome {
        // Index-based so the stream's closure is not higher-ranked over the
        // item lifetime, which keeps the future `Send` inside axum handlers.
        let traces: Vec<RolloutTrace> = stream::iter(0..questions.len())
            .map(|i| async move {
                let q = &questions[i];
                match self.run_attempt(&q.id, &q.question, cfg, 0).await {
                    Ok(trace) => trace,
                    Err(e) => *e.trace,
                }
            })
            .buffered(parallelism.max(1))
            .collect()
            .await;
        let metrics = BatchMetrics::from_traces(&traces);
        BatchOutcome { traces, metrics }
    }
}

fn origins_of(segments: &[Segment]) -> Vec<Origin> {
    segments
        .iter()
        .map(|s| if s.kind == SegmentKind::Information { Origin::Injected } else { Origin::ModelGenerated })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ingest, RawDocument};
    use crate::llm::ScriptBook;
    use crate::retriever::{Bm25Params, Bm25Retriever, Index};

    fn engine(book: ScriptBook) -> RolloutEngine {
        let store = ingest(
            [
                RawDocument { id: "a".into(), title: "Alpha".into(), text: "alpha is the first letter".into() },
                RawDocument { id: "b".into(), title: "Beta".into(), text: "beta is the second letter".into() },
            ],
            100,
        )
        .unwrap();
        let retriever = Bm25Retriever::new(Index::build(&store, Bm25Params::default()).unwrap());
        RolloutEngine::new(Arc::new(retriever), Arc::new(book))
    }

    #[tokio::test]
    async fn direct_answer() {
        let mut book = ScriptBook::new();
        book.insert("q?", ["<think> known </think>\n<answer> alpha </answer>"]);
        let trace = engine(book).run_episode("q?", &RolloutConfig::default()).await.unwrap();
        assert_eq!(trace.termination, Termination::Answered);
        assert_eq!(trace.final_answer.as_deref(), Some("alpha"));
        assert_eq!(trace.retrieval_count, 0);
        trace.check_invariants().unwrap();
    }

    #[tokio::test]
    async fn search_then_answer() {
        let mut book = ScriptBook::new();
        book.insert("q?", ["<think> t </think>\n<search> first letter </search>", "\n<answer> alpha </answer>"]);
        let trace = engine(book).run_episode("q?", &RolloutConfig::default()).await.unwrap();
        assert_eq!(trace.retrieval_count, 1);
        assert_eq!(trace.termination, Termination::Answered);
        let info = trace.information_segments().next().unwrap();
        assert!(info.text.contains("Doc 1: "));
        trace.check_invariants().unwrap();
        assert_eq!(
            trace.model_output(),
            "<think> t </think>\n<search> first letter </search>\n<answer> alpha </answer>"
        );
    }

    #[tokio::test]
    async fn violations_do_not_crash() {
        let cases = [
            "<think> a </search>",
            "<search> , </search>",
            "<information> fake </information>",
            "<think> trailing thought </think>",
        ];
        for turn in cases {
            let mut book = ScriptBook::new();
            book.insert("q?", [turn]);
            let trace = engine(book).run_episode("q?", &RolloutConfig::multi()).await.unwrap();
            assert_eq!(trace.termination, Termination::ProtocolViolation, "{turn}");
            assert!(!trace.warnings.is_empty());
            trace.check_invariants().unwrap();
        }
    }

    #[tokio::test]
    async fn length_and_exhaustion() {
        let mut book = ScriptBook::new();
        book.insert("q?", ["<think> one two three four five six"]);
        let cfg = RolloutConfig { max_new_tokens_per_round: 3, ..RolloutConfig::default() };
        let trace = engine(book).run_episode("q?", &cfg).await.unwrap();
        assert_eq!(trace.termination, Termination::LengthExceeded);
        assert!(!trace.segments[0].complete);

        let trace = engine(ScriptBook::new()).run_episode("unknown?", &cfg).await.unwrap();
        assert_eq!(trace.termination, Termination::ScriptExhausted);
    }

    #[tokio::test]
    async fn invalid_config_is_an_error_with_partial_trace() {
        let cfg = RolloutConfig { k: 0, ..RolloutConfig::default() };
        let err = engine(ScriptBook::new()).run_episode("q?", &cfg).await.unwrap_err();
        assert_eq!(err.trace.termination, Termination::Failed);
        assert!(err.trace.error.is_some());
    }

    #[tokio::test]
    async fn empty_question_fails_the_episode() {
        let err = engine(ScriptBook::new()).run_episode(" ", &RolloutConfig::default()).await.unwrap_err();
        assert!(matches!(err.source, EpisodeFailure::Protocol(_)));
    }

    #[test]
    fn batch_metrics_are_means() {
        let mut t = RolloutTrace {
            id: "x".into(),
            question: "q".into(),
            mode: QueryMode::Single,
            prompt: String::new(),
            segments: vec![],
            origins: vec![],
            retrieval_count: 1,
            warnings: vec![],
            termination: Termination::Answered,
            wall_time: 1.0,
            final_answer: Some("a".into()),
            rejected_output: None,
            error: None,
        };
        let mut u = t.clone();
        u.retrieval_count = 2;
        u.wall_time = 3.0;
        u.termination = Termination::LengthExceeded;
        t.final_answer = Some("a".into());
        let m = BatchMetrics::from_traces(&[t, u]);
        assert_eq!(m.mean_retrieval_count, 1.5);
        assert_eq!(m.mean_wall_time, 2.0);
        assert_eq!(m.answered_fraction, 0.5);
    }
}
