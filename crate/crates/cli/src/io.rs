//! Line-delimited JSON helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use searchloop_core::evaluation::{read_dataset, QaExample};
use searchloop_core::rollout::QuestionRecord;

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(items)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<usize> {
    let mut out = create(path)?;
    let mut n = 0;
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn read_qa(path: &Path) -> Result<Vec<QaExample>> {
    read_dataset(open(path)?).with_context(|| format!("cannot read dataset {}", path.display()))
}

/// Questions from line-delimited records with `question` (or `query`) and an
/// optional `id`. Benchmark files work as-is.
pub fn read_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    let mut questions = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        let Some(question) = ["question", "query"].iter().find_map(|k| value.get(k).and_then(Value::as_str)) else {
            bail!("{}:{}: record has no question", path.display(), n + 1);
        };
        let id = match value.get("id").or_else(|| value.get("_id")) {
            Some(Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => format!("line-{}", n + 1),
        };
        questions.push(QuestionRecord { id, question: question.to_string() });
    }
    Ok(questions)
}
