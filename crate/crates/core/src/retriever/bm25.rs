//! In-memory BM25 inverted index over a passage store.
//!
//! score(q, p) = Σ_{t ∈ q} idf(t) · tf(t,p)·(k1+1) / (tf(t,p) + k1·(1 − b + b·|p|/avg|p|))
//! idf(t)      = ln(1 + (N − df(t) + 0.5) / (df(t) + 0.5))
//!
//! Query terms count with multiplicity: a term repeated twice in the query
//! contributes twice. Only passages with a positive score are returned.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RetrievalError, SearchHit};
use crate::corpus::{Passage, PassageStore};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: DEFAULT_K1, b: DEFAULT_B }
    }
}

/// Lowercase alphanumeric runs. No stemming, no stop words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Text indexed for a passage: title then body.
pub fn indexed_text(passage: &Passage) -> String {
    format!("{} {}", passage.title, passage.body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting(pub u32, pub u32);

impl Posting {
    pub fn ordinal(&self) -> u32 {
        self.0
    }

    pub fn term_frequency(&self) -> u32 {
        self.1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Index {
    params: Bm25Params,
    store_checksum: String,
    passages: Vec<Passage>,
    lengths: Vec<u32>,
    avg_len: f64,
    /// Sorted vocabulary, aligned with `postings`.
    terms: Vec<String>,
    postings: Vec<Vec<Posting>>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Index {
    pub fn build(store: &PassageStore, params: Bm25Params) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        if params.k1.is_nan() || params.k1 <= 0.0 || !(0.0..=1.0).contains(&params.b) {
            return Err(RetrievalError::InvalidParams(format!(
                "k1 = {}, b = {}",
                params.k1, params.b
            )));
        }
        let passages = store.passages().to_vec();
        let mut lengths = Vec::with_capacity(passages.len());
        let mut by_term: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut counts: HashMap<String, u32> = HashMap::new();

        for (ordinal, passage) in passages.iter().enumerate() {
            let tokens = tokenize(&indexed_text(passage));
            lengths.push(tokens.len() as u32);
            counts.clear();
            for token in tokens {
                *counts.entry(token).or_default() += 1;
            }
            for (term, tf) in counts.drain() {
                by_term.entry(term).or_default().push(Posting(ordinal as u32, tf));
            }
        }

        let total: u64 = lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_len = total as f64 / lengths.len() as f64;

        let mut entries: Vec<(String, Vec<Posting>)> = by_term.into_iter().collect();
        entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        let (terms, postings): (Vec<_>, Vec<_>) = entries.into_iter().unzip();

        let mut index = Self {
            params,
            store_checksum: store.checksum().to_string(),
            passages,
            lengths,
            avg_len,
            terms,
            postings,
            lookup: HashMap::new(),
        };
        index.rebuild_lookup();
        Ok(index)
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn store_checksum(&self) -> &str {
        &self.store_checksum
    }

    pub fn passage_lengths(&self) -> &[u32] {
        &self.lengths
    }

    pub fn average_length(&self) -> f64 {
        self.avg_len
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.terms
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.lookup
            .get(term)
            .map(|&i| self.postings[i as usize].as_slice())
            .unwrap_or(&[])
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        self.idf_for_df(self.document_frequency(term))
    }

    fn idf_for_df(&self, df: usize) -> f64 {
        let n = self.passages.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let len = f64::from(len);
        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / self.avg_len))
    }

    /// SHA-256 over the canonical serialized index.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("index serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for token in tokenize(query) {
            let Some(&term) = self.lookup.get(&token) else {
                continue;
            };
            let postings = &self.postings[term as usize];
            let idf = self.idf_for_df(postings.len());
            for posting in postings {
                let len = self.lengths[posting.0 as usize];
                *scores.entry(posting.0).or_insert(0.0) += idf * self.term_weight(posting.1, len);
            }
        }

        let mut ranked: Vec<(u32, f64)> = scores.into_iter().filter(|&(_, s)| s > 0.0).collect();
        let order = |a: &(u32, f64), b: &(u32, f64)| -> Ordering {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    self.passages[a.0 as usize]
                        .passage_id
                        .cmp(&self.passages[b.0 as usize].passage_id)
                })
        };
        if ranked.len() > k {
            ranked.select_nth_unstable_by(k - 1, order);
            ranked.truncate(k);
        }
        ranked.sort_unstable_by(order);

        Ok(ranked
            .into_iter()
            .enumerate()
            .map(|(i, (ordinal, score))| {
                let p = &self.passages[ordinal as usize];
                SearchHit {
                    passage_id: p.passage_id.clone(),
                    title: p.title.clone(),
                    body: p.body.clone(),
                    score,
                    rank: i + 1,
                }
            })
            .collect())
    }

    /// Runs each query on its own thread; output is positional.
    pub fn search_many(
        &self,
        queries: &[String],
        k: usize,
    ) -> Result<Vec<Vec<SearchHit>>, RetrievalError> {
        if queries.len() <= 1 {
            return queries.iter().map(|q| self.search(q, k)).collect();
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = queries
                .iter()
                .map(|q| scope.spawn(move || self.search(q, k)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("search thread panicked"))
                .collect()
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)
            .map_err(|e| RetrievalError::Corrupt(e.to_string()))?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let reader = BufReader::new(File::open(path)?);
        let mut index: Index = serde_json::from_reader(reader)
            .map_err(|e| RetrievalError::Corrupt(e.to_string()))?;
        if index.terms.len() != index.postings.len()
            || index.lengths.len() != index.passages.len()
            || index.passages.is_empty()
        {
            return Err(RetrievalError::Corrupt("inconsistent index tables".into()));
        }
        index.rebuild_lookup();
        Ok(index)
    }
}
