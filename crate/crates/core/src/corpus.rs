//! Passage store: titled fixed-size word chunks of raw documents.
//!
//! Documents are split on whitespace into consecutive chunks of
//! `passage_words` words. The title is kept beside the body and is not
//! counted against the word budget; retrieval and formatting decide how to
//! render it.
//!
//! On disk a store is line-delimited JSON: one header record followed by one
//! record per passage. The header carries the segmentation config and a
//! SHA-256 checksum over the passage lines, so a truncated or edited file is
//! rejected on load.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_PASSAGE_WORDS: usize = 100;

const STORE_FORMAT: &str = "searchloop-passages";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("passage_words must be at least 1")]
    InvalidPassageWords,
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("corrupt passage store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One input document. `text` is whitespace-separated words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    #[serde(alias = "doc_id", alias = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, alias = "contents", alias = "body")]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub title: String,
    pub body: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub passage_words: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { passage_words: DEFAULT_PASSAGE_WORDS }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassageStore {
    config: SegmentationConfig,
    passages: Vec<Passage>,
    checksum: String,
}

/// Records that could not be ingested, by input line number.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestTally {
    pub documents: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    version: u32,
    passage_words: usize,
    passages: usize,
    checksum: String,
}

impl PassageStore {
    pub fn config(&self) -> SegmentationConfig {
        self.config
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, ordinal: usize) -> Option<&Passage> {
        self.passages.get(ordinal)
    }

    fn from_parts(config: SegmentationConfig, passages: Vec<Passage>) -> Self {
        let checksum = checksum_of(&passages);
        Self { config, passages, checksum }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<(), CorpusError> {
        let header = StoreHeader {
            format: STORE_FORMAT.to_string(),
            version: STORE_VERSION,
            passage_words: self.config.passage_words,
            passages: self.passages.len(),
            checksum: self.checksum.clone(),
        };
        serde_json::to_writer(&mut *out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for passage in &self.passages {
            out.write_all(passage_line(passage).as_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| CorpusError::Corrupt("missing header".into()))??;
        let header: StoreHeader = serde_json::from_str(&header_line)
            .map_err(|e| CorpusError::Corrupt(format!("bad header: {e}")))?;
        if header.format != STORE_FORMAT || header.version != STORE_VERSION {
            return Err(CorpusError::Corrupt(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        if header.passage_words == 0 {
            return Err(CorpusError::Corrupt("passage_words is 0".into()));
        }

        let mut passages = Vec::with_capacity(header.passages);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let passage: Passage = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Corrupt(format!("passage record {}: {e}", n + 1)))?;
            passages.push(passage);
        }
        if passages.len() != header.passages {
            return Err(CorpusError::Corrupt(format!(
                "header declares {} passages, found {}",
                header.passages,
                passages.len()
            )));
        }
        let store = Self::from_parts(
            SegmentationConfig { passage_words: header.passage_words },
            passages,
        );
        if store.checksum != header.checksum {
            return Err(CorpusError::Corrupt(format!(
                "checksum mismatch: header {}, content {}",
                header.checksum, store.checksum
            )));
        }
        Ok(store)
    }
}

fn passage_line(passage: &Passage) -> String {
    let mut line = serde_json::to_string(passage).expect("passage serializes");
    line.push('\n');
    line
}

fn checksum_of(passages: &[Passage]) -> String {
    let mut hasher = Sha256::new();
    for passage in passages {
        hasher.update(passage_line(passage).as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Split one document into passages. Empty text yields nothing.
pub fn chunk_document(doc: &RawDocument, passage_words: usize) -> Vec<Passage> {
    let words: Vec<&str> = doc.text.split_whitespace().collect();
    words
        .chunks(passage_words.max(1))
        .enumerate()
        .map(|(ordinal, chunk)| Passage {
            passage_id: format!("{}:{}", doc.id, ordinal),
            title: doc.title.clone(),
            body: chunk.join(" "),
            word_count: chunk.len(),
        })
        .collect()
}

/// Build a store from already-parsed documents.
pub fn ingest<I>(documents: I, passage_words: usize) -> Result<PassageStore, CorpusError>
where
    I: IntoIterator<Item = RawDocument>,
{
    let (store, _) = ingest_records(documents.into_iter().map(Ok), passage_words)?;
    Ok(store)
}

/// Build a store from a stream of records that may have failed to decode.
/// Failed or invalid records are skipped and tallied; a duplicate id aborts.
pub fn ingest_records<I>(
    records: I,
    passage_words: usize,
) -> Result<(PassageStore, IngestTally), CorpusError>
where
    I: IntoIterator<Item = Result<RawDocument, String>>,
{
    if passage_words == 0 {
        return Err(CorpusError::InvalidPassageWords);
    }
    let mut seen = HashSet::new();
    let mut passages = Vec::new();
    let mut tally = IngestTally::default();

    for (n, record) in records.into_iter().enumerate() {
        let doc = match record {
            Ok(doc) => doc,
            Err(reason) => {
                tally.skipped += 1;
                tally.warnings.push(format!("record {}: {reason}", n + 1));
                continue;
            }
        };
        if doc.id.is_empty() {
            tally.skipped += 1;
            tally.warnings.push(format!("record {}: empty id", n + 1));
            continue;
        }
        if doc.title.is_empty() && doc.text.trim().is_empty() {
            tally.skipped += 1;
            tally.warnings.push(format!("record {}: `{}` has neither title nor text", n + 1, doc.id));
            continue;
        }
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateDocId(doc.id));
        }
        tally.documents += 1;
        passages.extend(chunk_document(&doc, passage_words));
    }

    if tally.skipped > 0 {
        tracing::warn!(skipped = tally.skipped, "skipped unreadable corpus records");
    }
    Ok((PassageStore::from_parts(SegmentationConfig { passage_words }, passages), tally))
}

/// Ingest line-delimited `{id, title, text}` records.
pub fn ingest_jsonl(
    reader: impl Read,
    passage_words: usize,
) -> Result<(PassageStore, IngestTally), CorpusError> {
    let mut io_error = None;
    let records = BufReader::new(reader)
        .lines()
        .map_while(|line| match line {
            Ok(line) => Some(line),
            Err(e) => {
                io_error = Some(e);
                None
            }
        })
        .filter(|line| !line.trim().is_empty())
        .map(|line| serde_json::from_str::<RawDocument>(&line).map_err(|e| e.to_string()));
    let result = ingest_records(records, passage_words);
    if let Some(e) = io_error {
        return Err(e.into());
    }
    result
}
