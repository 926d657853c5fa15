use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_stop_rules, EpisodeKey, GenerationRequest, GenerationResult, LanguageModel, LlmError, ModelProvider};

/// Replays fixed turns in order, one per `generate` call.
#[derive(Debug)]
pub struct ScriptedModel {
    turns: Vec<String>,
    cursor: AtomicUsize,
}

impl ScriptedModel {
    pub fn new<I, S>(turns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { turns: turns.into_iter().map(Into::into).collect(), cursor: AtomicUsize::new(0) }
    }

    pub fn turns_served(&self) -> usize {
        self.cursor.load(Ordering::SeqCst).min(self.turns.len())
    }
}

#[async_trait]
impl LanguageModel for ScriptedModel {
    async fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, LlmError> {
        request.validate()?;
        let at = self.cursor.fetch_add(1, Ordering::SeqCst);
        let turn = self
            .turns
            .get(at)
            .ok_or(LlmError::ScriptExhausted { turns: self.turns.len() })?;
        let (text, stop_reason) = apply_stop_rules(turn, &request.stop_sequences, request.max_new_tokens);
        Ok(GenerationResult { text, stop_reason, latency: 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedScript {
    pub weight: f64,
    pub turns: Vec<String>,
}

/// Either one fixed script or a weighted set sampled per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Fixed(Vec<String>),
    Weighted(Vec<WeightedScript>),
}

/// Per-question scripts keyed by question text.
///
/// Weighted entries are sampled with a generator seeded from the episode's
/// seed, question and attempt number, so a given episode always draws the
/// same script regardless of scheduling. Questions without a script get an
/// empty one and end as script-exhausted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptBook {
    scripts: HashMap<String, ScriptEntry>,
}

impl ScriptBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<I, S>(&mut self, question: impl Into<String>, turns: I) -> &mut Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.scripts
            .insert(question.into(), ScriptEntry::Fixed(turns.into_iter().map(Into::into).collect()));
        self
    }

    pub fn insert_weighted(&mut self, question: impl Into<String>, options: Vec<WeightedScript>) -> &mut Self {
        self.scripts.insert(question.into(), ScriptEntry::Weighted(options));
        self
    }

    pub fn len(&self) -> usize {
        self.scripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scripts.is_empty()
    }

    pub fn turns_for(&self, key: &EpisodeKey<'_>) -> Vec<String> {
        match self.scripts.get(key.question) {
            None => Vec::new(),
            Some(ScriptEntry::Fixed(turns)) => turns.clone(),
            Some(ScriptEntry::Weighted(options)) => {
                let total: f64 = options.iter().map(|o| o.weight.max(0.0)).sum();
                if options.is_empty() || total.is_nan() || total <= 0.0 {
                    return Vec::new();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(key));
                let mut draw = rng.random::<f64>() * total;
                for option in options {
                    let w = option.weight.max(0.0);
                    if draw < w {
                        return option.turns.clone();
                    }
                    draw -= w;
                }
                options.last().map(|o| o.turns.clone()).unwrap_or_default()
            }
        }
    }
}

impl ModelProvider for ScriptBook {
    fn model_for(&self, key: &EpisodeKey<'_>) -> Result<Arc<dyn LanguageModel>, LlmError> {
        Ok(Arc::new(ScriptedModel::new(self.turns_for(key))))
    }
}

// FNV-1a over (seed, attempt, question): stable across platforms and runs.
fn episode_seed(key: &EpisodeKey<'_>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let seed = key.seed.unwrap_or(0).to_le_bytes();
    let attempt = key.attempt.to_le_bytes();
    for byte in seed.iter().chain(attempt.iter()).chain(key.question.as_bytes()) {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(PRIME);
    }
    h
}
