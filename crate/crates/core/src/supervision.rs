//! Training signal derived from rollout traces.
//!
//! * Exact-match reward on the extracted final answer.
//! * Loss masks that exclude injected information blocks, as byte spans over
//!   the post-prompt transcript, so any tokenizer can map them to tokens.
//! * SFT segmentation: an answered trace with n retrievals becomes n + 1
//!   (input, target) pairs cut at every information block; targets never
//!   contain retrieved text.
//! * RL data selection: keep questions a sampling teacher answers correctly
//!   at least once in a bounded number of rollouts, and mix in a seeded
//!   fraction of already-solved questions.

use std::sync::OnceLock;

use futures::stream::{self, StreamExt};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::QaExample;
use crate::protocol::{QueryMode, SegmentKind};
use crate::retriever::DEFAULT_TOP_K;
use crate::rollout::{RolloutConfig, RolloutEngine, RolloutTrace, Termination};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupervisionError {
    #[error("segment spans overlap or are out of order at segment {index}")]
    OverlappingSpans { index: usize },
    #[error("trace `{id}` is not answered ({termination:?}); only answered traces are segmented")]
    NotAnswered { id: String, termination: Termination },
    #[error("trace `{id}` cannot be segmented at bytes {start}..{end}: {reason}")]
    Segmentation { id: String, start: usize, end: usize, reason: String },
    #[error("fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
}

fn articles() -> &'static Regex {
    static ARTICLES: OnceLock<Regex> = OnceLock::new();
    ARTICLES.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid regex"))
}

/// Open-domain QA answer normalization: lowercase, drop ASCII punctuation,
/// drop the articles a/an/the as whole words, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = articles().replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reward {
    pub value: u8,
    pub predicted: Option<String>,
    pub gold: Vec<String>,
}

/// 1 iff the normalized prediction equals any normalized gold answer.
pub fn exact_match(predicted: Option<&str>, gold: &[String]) -> Reward {
    let value = predicted.is_some_and(|p| {
        let p = normalize_answer(p);
        gold.iter().any(|g| normalize_answer(g) == p)
    });
    Reward { value: u8::from(value), predicted: predicted.map(str::to_string), gold: gold.to_vec() }
}

/// Byte spans of the transcript excluded from the loss.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossMask {
    pub spans: Vec<(usize, usize)>,
}

impl LossMask {
    pub fn masked_len(&self) -> usize {
        self.spans.iter().map(|(s, e)| e - s).sum()
    }

    pub fn is_masked(&self, offset: usize) -> bool {
        let i = self.spans.partition_point(|&(_, end)| end <= offset);
        self.spans.get(i).is_some_and(|&(start, _)| start <= offset)
    }

    /// Per-token loss flags for tokens given as byte offsets into the same
    /// transcript: `false` when the token overlaps a masked span.
    pub fn token_loss_flags(&self, token_offsets: &[(usize, usize)]) -> Vec<bool> {
        token_offsets
            .iter()
            .map(|&(start, end)| {
                let i = self.spans.partition_point(|&(_, e)| e <= start);
                !self.spans.get(i).is_some_and(|&(s, _)| s < end.max(start + 1))
            })
            .collect()
    }
}

pub fn compute_loss_mask(trace: &RolloutTrace) -> Result<LossMask, SupervisionError> {
    let mut cursor = 0;
    for (index, segment) in trace.segments.iter().enumerate() {
        if segment.span.0 < cursor || segment.span.1 < segment.span.0 {
            return Err(SupervisionError::OverlappingSpans { index });
        }
        cursor = segment.span.1;
    }
    Ok(LossMask { spans: trace.information_segments().map(|s| s.span).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftCategory {
    /// No retrieval yet, answers from internal knowledge.
    DirectAnswer,
    /// No retrieval yet, decides to search.
    InitialSearch,
    /// After retrieval, searches again.
    ContinuedSearch,
    /// After retrieval, answers.
    InformedAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSample {
    pub input: String,
    pub target: String,
    pub category: SftCategory,
    pub source_trace_id: String,
}

pub fn segment_sft(trace: &RolloutTrace) -> Result<Vec<SftSample>, SupervisionError> {
    if trace.termination != Termination::Answered {
        return Err(SupervisionError::NotAnswered { id: trace.id.clone(), termination: trace.termination });
    }
    compute_loss_mask(trace)?;
    let transcript = trace.transcript();
    let infos: Vec<usize> = trace
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == SegmentKind::Information)
        .map(|(i, _)| i)
        .collect();

    let fail = |start: usize, end: usize, reason: &str| SupervisionError::Segmentation {
        id: trace.id.clone(),
        start,
        end,
        reason: reason.to_string(),
    };

    let mut samples = Vec::with_capacity(infos.len() + 1);
    let mut first_segment = 0;
    for round in 0..=infos.len() {
        let last_round = round == infos.len();
        let end_segment = if last_round { trace.segments.len() } else { infos[round] };
        let window = &trace.segments[first_segment..end_segment];
        let start = trace.segments.get(first_segment).map_or(transcript.len(), |s| s.span.0);
        let end = if last_round { transcript.len() } else { trace.segments[end_segment].span.0 };

        let closing = window.last();
        let expected = if last_round { SegmentKind::Answer } else { SegmentKind::Search };
        if !closing.is_some_and(|s| s.is_closed(expected)) {
            return Err(fail(start, end, &format!("target does not end with a closed {}", expected.name())));
        }
        if !last_round && window.iter().any(|s| s.kind == SegmentKind::Answer) {
            return Err(fail(start, end, "answer before the last information block"));
        }

        let category = match (round == 0, last_round) {
            (true, true) => SftCategory::DirectAnswer,
            (true, false) => SftCategory::InitialSearch,
            (false, false) => SftCategory::ContinuedSearch,
            (false, true) => SftCategory::InformedAnswer,
        };
        samples.push(SftSample {
            input: format!("{}{}", trace.prompt, &transcript[..start]),
            target: transcript[start..end].to_string(),
            category,
            source_trace_id: trace.id.clone(),
        });
        first_segment = end_segment + 1;
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub rollouts: u32,
    pub temperature: f64,
    pub max_retrievals: usize,
    pub mode: QueryMode,
    pub k: usize,
    pub max_new_tokens_per_round: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            rollouts: 10,
            temperature: 1.2,
            max_retrievals: 10,
            mode: QueryMode::Single,
            k: DEFAULT_TOP_K,
            max_new_tokens_per_round: crate::rollout::DEFAULT_MAX_NEW_TOKENS,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    /// Rollout settings for one attempt; each attempt gets its own seed.
    pub fn rollout_config(&self, attempt: u32) -> RolloutConfig {
        RolloutConfig {
            mode: self.mode,
            k: self.k,
            max_retrievals: self.max_retrievals,
            max_new_tokens_per_round: self.max_new_tokens_per_round,
            temperature: self.temperature,
            seed: Some(self.seed.wrapping_add(u64::from(attempt).wrapping_mul(0x9e37_79b9_7f4a_7c15))),
            ..RolloutConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub question_id: String,
    pub rollouts_attempted: u32,
    pub successes: u32,
    /// Attempts that ended in an episode error.
    pub failures: u32,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub kept: Vec<QaExample>,
    pub reports: Vec<SelectionReport>,
}

/// Questions are processed concurrently; attempts within a question run in
/// order and stop at the first correct answer.
pub async fn select_rl_data(
    engine: &RolloutEngine,
    questions: &[QaExample],
    cfg: &SelectionConfig,
    parallelism: usize,
) -> SelectionOutcome {
    let reports: Vec<SelectionReport> = stream::iter(0..questions.len())
        .map(|i| async move {
            let q = &questions[i];
            let mut report = SelectionReport {
                question_id: q.id.clone(),
                rollouts_attempted: 0,
                successes: 0,
                failures: 0,
                kept: false,
            };
            for attempt in 0..cfg.rollouts {
                report.rollouts_attempted += 1;
                match engine.run_attempt(&q.id, &q.question, &cfg.rollout_config(attempt), attempt).await {
                    Ok(trace) => {
                        if exact_match(trace.final_answer.as_deref(), &q.golden_answers).value == 1 {
                            report.successes += 1;
                            break;
                        }
                    }
                    Err(e) => {
                        tracing::debug!(question = %q.id, attempt, error = %e, "selection rollout failed");
                        report.failures += 1;
                    }
                }
            }
            report.kept = report.successes >= 1;
            report
        })
        .buffered(parallelism.max(1))
        .collect()
        .await;

    let kept = questions
        .iter()
        .zip(&reports)
        .filter(|(_, r)| r.kept)
        .map(|(q, _)| q.clone())
        .collect();
    SelectionOutcome { kept, reports }
}

/// All of `hard` plus floor(fraction·|correct|) items drawn uniformly without
/// replacement from `correct`, shuffled together. Seeded.
pub fn mix_datasets<T: Clone>(hard: &[T], correct: &[T], correct_fraction: f64, seed: u64) -> Result<Vec<T>, SupervisionError> {
    if !(0.0..=1.0).contains(&correct_fraction) {
        return Err(SupervisionError::InvalidFraction(correct_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = (correct_fraction * correct.len() as f64).floor() as usize;
    let mut mixed: Vec<T> = hard.to_vec();
    mixed.extend(index::sample(&mut rng, correct.len(), take).into_iter().map(|i| correct[i].clone()));
    mixed.shuffle(&mut rng);
    Ok(mixed)
}

/// Outcome of teacher rollouts over a labelled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftGeneration {
    pub samples: Vec<SftSample>,
    pub correct: Vec<QaExample>,
    pub incorrect: Vec<QaExample>,
    pub traces: Vec<RolloutTrace>,
}

/// Roll out every question, keep the correctly answered traces and segment
/// them. Incorrect questions are the candidates for RL data selection.
pub async fn generate_sft(
    engine: &RolloutEngine,
    dataset: &[QaExample],
    cfg: &RolloutConfig,
    parallelism: usize,
) -> SftGeneration {
    let questions: Vec<_> = dataset.iter().map(QaExample::question_record).collect();
    let outcome = engine.run_batch(&questions, cfg, parallelism).await;
    let mut generation = SftGeneration { samples: Vec::new(), correct: Vec::new(), incorrect: Vec::new(), traces: Vec::new() };
    for (example, trace) in dataset.iter().zip(outcome.traces) {
        let reward = exact_match(trace.final_answer.as_deref(), &example.golden_answers);
        let segmented = if reward.value == 1 { segment_sft(&trace).ok() } else { None };
        match segmented {
            Some(samples) => {
                generation.samples.extend(samples);
                generation.correct.push(example.clone());
            }
            None => generation.incorrect.push(example.clone()),
        }
        generation.traces.push(trace);
    }
    generation
}
