//! Benchmark harness: exact match, mean wall time and mean retrieval count
//! per dataset, and paired comparison of two rollout configurations.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rollout::{QuestionRecord, RolloutConfig, RolloutEngine, Termination};
use crate::supervision::exact_match;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("record {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("the two runs cover different examples")]
    Mismatched,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
}

impl QaExample {
    pub fn question_record(&self) -> QuestionRecord {
        QuestionRecord { id: self.id.clone(), question: self.question.clone() }
    }
}

const ID_FIELDS: [&str; 5] = ["id", "_id", "qid", "question_id", "example_id"];
const QUESTION_FIELDS: [&str; 3] = ["question", "query", "input"];
const ANSWER_FIELDS: [&str; 6] = ["golden_answers", "answers", "answer", "possible_answers", "gold", "target"];

fn answer_strings(value: &Value, out: &mut Vec<String>) {
    match value {
        Value::String(s) => {
            // Some dumps store the answer list as a JSON-encoded string.
            let trimmed = s.trim();
            if trimmed.starts_with('[') {
                if let Ok(inner @ Value::Array(_)) = serde_json::from_str::<Value>(trimmed) {
                    answer_strings(&inner, out);
                    return;
                }
            }
            out.push(s.clone());
        }
        Value::Array(items) => items.iter().for_each(|v| answer_strings(v, out)),
        Value::Object(map) => {
            for key in ["value", "text", "aliases"] {
                if let Some(v) = map.get(key) {
                    answer_strings(v, out);
                }
            }
        }
        Value::Number(n) => out.push(n.to_string()),
        Value::Bool(b) => out.push(if *b { "yes" } else { "no" }.to_string()),
        Value::Null => {}
    }
}

/// Map a benchmark record with any common field spelling onto a
/// [`QaExample`]. `fallback_id` is used when the record has no id.
pub fn convert_record(record: &Value, fallback_id: &str) -> Result<QaExample, String> {
    let obj = record.as_object().ok_or("record is not an object")?;
    let id = ID_FIELDS
        .iter()
        .find_map(|k| obj.get(*k))
        .map(|v| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .unwrap_or_else(|| fallback_id.to_string());
    let question = QUESTION_FIELDS
        .iter()
        .find_map(|k| obj.get(*k).and_then(Value::as_str))
        .ok_or("no question field")?
        .to_string();
    let mut golden_answers = Vec::new();
    if let Some(v) = ANSWER_FIELDS.iter().find_map(|k| obj.get(*k)) {
        answer_strings(v, &mut golden_answers);
    }
    golden_answers.dedup();
    if golden_answers.is_empty() {
        return Err("no gold answers".into());
    }
    Ok(QaExample { id, question, golden_answers })
}

/// Read line-delimited benchmark records, accepting common field spellings.
pub fn read_dataset(reader: impl Read) -> Result<Vec<QaExample>, EvalError> {
    let mut examples = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EvalError::BadRecord { line: n + 1, reason };
        let value: Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        examples.push(convert_record(&value, &format!("line-{}", n + 1)).map_err(bad)?);
    }
    Ok(examples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: String,
    pub predicted: Option<String>,
    pub em: u8,
    pub retrieval_count: usize,
    /// Seconds.
    pub time: f64,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub mode: String,
    pub n: usize,
    pub em: f64,
    pub avg_time: f64,
    pub avg_retrieval_count: f64,
    pub termination_histogram: BTreeMap<Termination, usize>,
    pub per_example: Vec<ExampleResult>,
}

impl EvalReport {
    /// Aggregates computed from the rows alone.
    pub fn from_rows(dataset_name: &str, mode: &str, per_example: Vec<ExampleResult>) -> Self {
        let n = per_example.len();
        let mean = |f: &dyn Fn(&ExampleResult) -> f64| {
            if n == 0 { 0.0 } else { per_example.iter().map(f).sum::<f64>() / n as f64 }
        };
        let em = mean(&|r| f64::from(r.em));
        let avg_time = mean(&|r| r.time);
        let avg_retrieval_count = mean(&|r| r.retrieval_count as f64);
        let mut termination_histogram = BTreeMap::new();
        for row in &per_example {
            *termination_histogram.entry(row.termination).or_insert(0) += 1;
        }
        Self {
            dataset_name: dataset_name.to_string(),
            mode: mode.to_string(),
            n,
            em,
            avg_time,
            avg_retrieval_count,
            termination_histogram,
            per_example,
        }
    }

    /// True when the stored aggregates equal a recomputation from the rows.
    pub fn is_consistent(&self) -> bool {
        let again = Self::from_rows(&self.dataset_name, &self.mode, self.per_example.clone());
        again == *self
    }
}

pub async fn evaluate(
    engine: &RolloutEngine,
    dataset_name: &str,
    dataset: &[QaExample],
    cfg: &RolloutConfig,
    parallelism: usize,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let questions: Vec<QuestionRecord> = dataset.iter().map(QaExample::question_record).collect();
    let outcome = engine.run_batch(&questions, cfg, parallelism).await;
    let rows = dataset
        .iter()
        .zip(outcome.traces)
        .map(|(example, trace)| ExampleResult {
            id: example.id.clone(),
            em: exact_match(trace.final_answer.as_deref(), &example.golden_answers).value,
            predicted: trace.final_answer,
            retrieval_count: trace.retrieval_count,
            time: trace.wall_time,
            termination: trace.termination,
        })
        .collect();
    Ok(EvalReport::from_rows(dataset_name, cfg.mode.name(), rows))
}

/// Per-example differences, always `a − b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub id: String,
    pub em_a: u8,
    pub em_b: u8,
    pub delta_em: i32,
    pub delta_time: f64,
    pub delta_retrieval_count: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub a: EvalReport,
    pub b: EvalReport,
    pub rows: Vec<PairedRow>,
    pub delta_em: f64,
    pub delta_avg_time: f64,
    pub delta_avg_retrieval_count: f64,
}

impl PairedReport {
    pub fn pair(a: EvalReport, b: EvalReport) -> Result<Self, EvalError> {
        if a.per_example.len() != b.per_example.len()
            || a.per_example.iter().zip(&b.per_example).any(|(x, y)| x.id != y.id)
        {
            return Err(EvalError::Mismatched);
        }
        let rows = a
            .per_example
            .iter()
            .zip(&b.per_example)
            .map(|(x, y)| PairedRow {
                id: x.id.clone(),
                em_a: x.em,
                em_b: y.em,
                delta_em: i32::from(x.em) - i32::from(y.em),
                delta_time: x.time - y.time,
                delta_retrieval_count: x.retrieval_count as i64 - y.retrieval_count as i64,
            })
            .collect();
        Ok(Self {
            delta_em: a.em - b.em,
            delta_avg_time: a.avg_time - b.avg_time,
            delta_avg_retrieval_count: a.avg_retrieval_count - b.avg_retrieval_count,
            rows,
            a,
            b,
        })
    }
}

/// Evaluate the same dataset under two setups. Each side brings its own
/// engine so scripted backends can differ per mode.
pub async fn compare_modes(
    dataset_name: &str,
    dataset: &[QaExample],
    a: (&RolloutEngine, &RolloutConfig),
    b: (&RolloutEngine, &RolloutConfig),
    parallelism: usize,
) -> Result<PairedReport, EvalError> {
    let report_a = evaluate(a.0, dataset_name, dataset, a.1, parallelism).await?;
    let report_b = evaluate(b.0, dataset_name, dataset, b.1, parallelism).await?;
    PairedReport::pair(report_a, report_b)
}
