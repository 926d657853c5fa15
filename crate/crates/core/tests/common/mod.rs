#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use searchloop_core::corpus::{ingest, ingest_jsonl, Passage, PassageStore, RawDocument};
use searchloop_core::llm::ScriptBook;
use searchloop_core::protocol::{parse_transcript, QueryMode, Segment, SegmentKind};
use searchloop_core::retriever::{
    indexed_text, tokenize, BatchResult, Bm25Params, Bm25Retriever, Index, RetrievalError, Retriever,
};
use searchloop_core::rollout::{FrozenClock, RolloutConfig, RolloutEngine};

pub const TOY_CORPUS: &str = include_str!("../fixtures/toy_corpus.jsonl");

pub const MAGAZINES_QUESTION: &str = "Which magazine was started first Arthur's Magazine or First for Women?";
pub const GENERA_QUESTION: &str = "Are both Dictyosperma, and Huernia described as a genus?";

pub fn fixture(name: &str) -> String {
    let path = format!("{}/tests/fixtures/{name}.txt", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    text.strip_suffix('\n').unwrap_or(&text).to_string()
}

pub fn toy_store() -> PassageStore {
    ingest_jsonl(TOY_CORPUS.as_bytes(), 100).unwrap().0
}

pub fn toy_retriever() -> Bm25Retriever {
    Bm25Retriever::new(Index::build(&toy_store(), Bm25Params::default()).unwrap())
}

/// Model turns of a recorded transcript: the text between information
/// blocks, each ending exactly at its stop tag.
pub fn model_turns(transcript: &str) -> Vec<String> {
    let segments = parse_transcript(transcript).unwrap();
    let mut turns = Vec::new();
    let mut current = String::new();
    for segment in &segments {
        if segment.kind == SegmentKind::Information {
            turns.push(std::mem::take(&mut current).trim_end().to_string());
        } else {
            current.push_str(&segment.rendered());
        }
    }
    turns.push(current.trim_end().to_string());
    turns
}

pub struct WorkedCase {
    pub fixture: &'static str,
    pub question: &'static str,
    pub gold: &'static str,
    pub mode: QueryMode,
    pub retrievals: usize,
    pub answer: &'static str,
    pub em: u8,
}

pub fn worked_cases() -> Vec<WorkedCase> {
    vec![
        WorkedCase {
            fixture: "magazines_single",
            question: MAGAZINES_QUESTION,
            gold: "Arthur's Magazine",
            mode: QueryMode::Single,
            retrievals: 2,
            answer: "Arthur's Magazine",
            em: 1,
        },
        WorkedCase {
            fixture: "magazines_multi",
            question: MAGAZINES_QUESTION,
            gold: "Arthur's Magazine",
            mode: QueryMode::multi(),
            retrievals: 1,
            answer: "Arthur's Magazine",
            em: 1,
        },
        WorkedCase {
            fixture: "genera_single",
            question: GENERA_QUESTION,
            gold: "Yes",
            mode: QueryMode::Single,
            retrievals: 3,
            answer: "No",
            em: 0,
        },
        WorkedCase {
            fixture: "genera_multi",
            question: GENERA_QUESTION,
            gold: "Yes",
            mode: QueryMode::multi(),
            retrievals: 2,
            answer: "Yes",
            em: 1,
        },
    ]
}

/// Scripts for every worked question in one mode.
pub fn worked_book(multi: bool) -> ScriptBook {
    let mut book = ScriptBook::new();
    for case in worked_cases().into_iter().filter(|c| c.mode.is_multi() == multi) {
        book.insert(case.question, model_turns(&fixture(case.fixture)));
    }
    book
}

pub fn engine_with(retriever: Arc<dyn Retriever>, book: ScriptBook) -> RolloutEngine {
    RolloutEngine::new(retriever, Arc::new(book)).with_clock(Arc::new(FrozenClock))
}

pub fn worked_config(mode: QueryMode) -> RolloutConfig {
    RolloutConfig { mode, ..RolloutConfig::default() }
}

/// Counts calls and queries passed to the wrapped retriever.
pub struct CountingRetriever<R> {
    pub inner: R,
    pub calls: AtomicUsize,
    pub queries: AtomicUsize,
}

impl<R> CountingRetriever<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, calls: AtomicUsize::new(0), queries: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn queries(&self) -> usize {
        self.queries.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl<R: Retriever> Retriever for CountingRetriever<R> {
    async fn search_batch(&self, queries: &[String], k: usize) -> Result<BatchResult, RetrievalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.queries.fetch_add(queries.len(), Ordering::SeqCst);
        self.inner.search_batch(queries, k).await
    }
}

/// Returns no hits for anything.
pub struct EmptyRetriever;

#[async_trait]
impl Retriever for EmptyRetriever {
    async fn search_batch(&self, queries: &[String], _k: usize) -> Result<BatchResult, RetrievalError> {
        Ok(BatchResult { queries: queries.to_vec(), hits_per_query: vec![Vec::new(); queries.len()] })
    }
}

// ---------------------------------------------------------------------------
// BM25 oracle: scores every passage directly from its own token counts.
// ---------------------------------------------------------------------------

pub fn oracle_search(passages: &[Passage], params: Bm25Params, query: &str, k: usize) -> Vec<(String, f64)> {
    let docs: Vec<Vec<String>> = passages.iter().map(|p| tokenize(&indexed_text(p))).collect();
    let n = docs.len() as f64;
    let total: u64 = docs.iter().map(|d| d.len() as u64).sum();
    let avg = total as f64 / n;
    let query_terms = tokenize(query);

    let mut scored = Vec::new();
    for (p, doc) in passages.iter().zip(&docs) {
        let len = doc.len() as f64;
        let mut score = 0.0;
        for term in &query_terms {
            let tf = doc.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * (tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * len / avg)));
        }
        if score > 0.0 {
            scored.push((p.passage_id.clone(), score));
        }
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Seeded synthetic corpus with a skewed word distribution.
pub fn synthetic_documents(seed: u64, docs: usize, words_per_doc: usize, vocab: usize) -> Vec<RawDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocabulary: Vec<String> = (0..vocab).map(|i| format!("w{i}")).collect();
    (0..docs)
        .map(|d| {
            let text = (0..words_per_doc)
                .map(|_| {
                    // Squared uniform skews draws toward low word ids.
                    let u: f64 = rng.random();
                    vocabulary[((u * u) * vocab as f64) as usize % vocab].as_str()
                })
                .collect::<Vec<_>>()
                .join(" ");
            RawDocument { id: format!("doc{d:05}"), title: format!("Title {}", vocabulary[d % vocab]), text }
        })
        .collect()
}

pub fn synthetic_store(seed: u64, passages: usize) -> PassageStore {
    ingest(synthetic_documents(seed, passages, 60, 400), 100).unwrap()
}

pub fn random_query(rng: &mut ChaCha8Rng, vocab: usize) -> String {
    let len = rng.random_range(1..=5);
    (0..len)
        .map(|_| {
            if rng.random_bool(0.1) {
                "unseenterm".to_string()
            } else {
                let u: f64 = rng.random();
                format!("w{}", ((u * u) * vocab as f64) as usize % vocab)
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// Transcript generator: builds text directly from the grammar.
// ---------------------------------------------------------------------------

const ALPHABET: &[&str] = &["a", "b", "Z", " ", " ", "\n", ",", "'", "\"", "é", "日", "<", ">", "/", "<b>", "x<y"];

fn random_text(rng: &mut ChaCha8Rng, allow_tags: bool) -> String {
    let len = rng.random_range(0..12);
    let mut out = String::new();
    for _ in 0..len {
        if allow_tags && rng.random_bool(0.15) {
            let kind = *[SegmentKind::Think, SegmentKind::Search, SegmentKind::Answer].choose(rng).unwrap();
            out.push_str(if rng.random_bool(0.5) { kind.open_tag() } else { kind.close_tag() });
        } else {
            out.push_str(ALPHABET.choose(rng).unwrap());
        }
    }
    out
}

/// A well-formed transcript and the segments it should parse into.
pub fn random_transcript(rng: &mut ChaCha8Rng) -> (String, Vec<Segment>) {
    let mut text = String::new();
    let mut segments = Vec::new();
    let pieces = rng.random_range(0..10);
    let mut last_plain = false;
    for i in 0..pieces {
        let kind = *[
            SegmentKind::Plain,
            SegmentKind::Think,
            SegmentKind::Search,
            SegmentKind::Information,
            SegmentKind::Answer,
        ]
        .choose(rng)
        .unwrap();
        let start = text.len();
        if kind == SegmentKind::Plain {
            if last_plain {
                continue;
            }
            let body = loop {
                let t = random_text(rng, false);
                if !t.is_empty() {
                    break t;
                }
            };
            text.push_str(&body);
            segments.push(Segment { kind, text: body, span: (start, text.len()), complete: true });
            last_plain = true;
            continue;
        }
        last_plain = false;
        let body = random_text(rng, kind == SegmentKind::Information);
        let complete = i + 1 < pieces || rng.random_bool(0.7);
        text.push_str(kind.open_tag());
        text.push_str(&body);
        if complete {
            text.push_str(kind.close_tag());
        }
        segments.push(Segment { kind, text: body, span: (start, text.len()), complete });
        if !complete {
            break;
        }
    }
    (text, segments)
}

// ---------------------------------------------------------------------------
// Random answered episodes, built by the engine from random scripts.
// ---------------------------------------------------------------------------

const QUERY_WORDS: &[&str] = &[
    "Arthur's Magazine", "First for Women", "Huernia genus", "Dictyosperma", "Philadelphia", "Bauer Media",
    "palm family", "zzz unknown", "founding year", "dayflower",
];

pub struct RandomEpisode {
    pub question: String,
    pub turns: Vec<String>,
    pub rounds: usize,
}

pub fn random_episode(rng: &mut ChaCha8Rng, id: usize, mode: QueryMode, max_rounds: usize) -> RandomEpisode {
    let rounds = rng.random_range(0..=max_rounds);
    let mut turns = Vec::new();
    for r in 0..=rounds {
        let mut turn = String::new();
        if r > 0 && rng.random_bool(0.8) {
            turn.push('\n');
        }
        if rng.random_bool(0.9) {
            turn.push_str(&format!("<think> step {r} {} </think>", random_text(rng, false).replace('<', "(")));
            if rng.random_bool(0.7) {
                turn.push('\n');
            }
        }
        if r < rounds {
            let n = if mode.is_multi() { rng.random_range(1..=4) } else { 1 };
            let queries: Vec<&str> = (0..n).map(|_| *QUERY_WORDS.choose(rng).unwrap()).collect();
            let sep = if mode.is_multi() { ", " } else { " " };
            turn.push_str(&format!("<search> {} </search>", queries.join(sep)));
        } else {
            turn.push_str(&format!("<answer> answer {id} </answer>"));
        }
        turns.push(turn);
    }
    RandomEpisode { question: format!("Synthetic question number {id}?"), turns, rounds }
}

pub fn word_counts(text: &str) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for w in text.split_whitespace() {
        *m.entry(w.to_string()).or_default() += 1;
    }
    m
}

// ---------------------------------------------------------------------------
// Sampling teacher for RL selection: each question has a correct and a wrong
// script with a per-question success probability.
// ---------------------------------------------------------------------------

pub fn teacher_dataset(n: usize) -> (Vec<searchloop_core::QaExample>, ScriptBook) {
    use searchloop_core::llm::WeightedScript;
    let mut book = ScriptBook::new();
    let mut dataset = Vec::new();
    for i in 0..n {
        let question = format!("Teacher question {i}: who founded Philadelphia?");
        let gold = format!("Founder {i}");
        // 0.0, 0.05, ..., cycling; roughly a quarter never succeed.
        let p = [0.0, 0.05, 0.1, 0.3, 0.6, 0.9][i % 6];
        book.insert_weighted(
            question.clone(),
            vec![
                WeightedScript {
                    weight: p,
                    turns: vec![
                        "<think> look it up </think>\n<search> Philadelphia founder </search>".into(),
                        format!("\n<think> found it </think>\n<answer> the founder {i} </answer>"),
                    ],
                },
                WeightedScript { weight: 1.0 - p, turns: vec![format!("<answer> somebody else {i} </answer>")] },
            ],
        );
        dataset.push(searchloop_core::QaExample { id: format!("t{i}"), question, golden_answers: vec![gold] });
    }
    (dataset, book)
}
