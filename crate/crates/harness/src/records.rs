//! Persisted metrics: line-delimited JSON records, one per batch plus a
//! final summary, all schema-versioned. Wall-clock timings live in a
//! separate sidecar so the metrics files stay byte-identical across reruns
//! of the same configuration.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use tta_core::{CoreError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Per-batch metrics. `acc` is the method's natural prediction point
/// (post-loop for poem, pre-update for everything else); `acc_pre` is always
/// the strict online prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub method: String,
    pub scenario: String,
    pub shift: String,
    pub severity: u8,
    pub entropy_factor: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub batch_index: usize,
    pub batch_size: usize,
    pub acc: f64,
    pub acc_pre: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_post: Option<f64>,
    pub n_selected: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_selected_final: Option<usize>,
    pub n_prs: usize,
    pub mean_entropy_pre: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_entropy_post: Option<f64>,
    pub mean_grad_norm: f64,
    pub forwards: usize,
    pub backwards: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prs_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prs_correct: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group1_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group1_correct: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group2_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group2_correct: Option<usize>,
}

/// End-of-run aggregate, written after the last batch record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub method: String,
    pub scenario: String,
    pub shift: String,
    pub severity: u8,
    pub entropy_factor: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub batches: usize,
    pub samples: usize,
    pub train_accuracy: f64,
    pub accuracy: f64,
    pub accuracy_pre: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_post: Option<f64>,
    pub mean_selected: f64,
    pub total_forwards: usize,
    pub total_backwards: usize,
    pub prs_total: usize,
    pub prs_correct: usize,
    pub group1_total: usize,
    pub group1_correct: usize,
    pub group2_total: usize,
    pub group2_correct: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "record")]
pub enum Record {
    #[serde(rename = "batch")]
    Batch(BatchRecord),
    #[serde(rename = "summary")]
    Summary(SummaryRecord),
}

impl Record {
    pub fn run_id(&self) -> &str {
        match self {
            Record::Batch(r) => &r.run_id,
            Record::Summary(r) => &r.run_id,
        }
    }
}

pub fn write_records<W: Write>(records: &[Record], out: &mut W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CoreError::Parse(format!("serialize record: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parses records, rejecting any line whose schema version is unknown.
pub fn read_records<R: BufRead>(input: &mut R) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| CoreError::Parse(format!("line {}: {e}", lineno + 1)))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(CoreError::Parse(format!(
                    "line {}: unknown schema version {v}",
                    lineno + 1
                )))
            }
            None => {
                return Err(CoreError::Parse(format!(
                    "line {}: missing schema_version",
                    lineno + 1
                )))
            }
        }
        let record: Record = serde_json::from_value(value)
            .map_err(|e| CoreError::Parse(format!("line {}: {e}", lineno + 1)))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_batch() -> BatchRecord {
        BatchRecord {
            schema_version: SCHEMA_VERSION,
            run_id: "r".into(),
            method: "poem".into(),
            scenario: "standard".into(),
            shift: "gauss_noise".into(),
            severity: 5,
            entropy_factor: 0.4,
            max_iters: 2,
            seed: 0,
            batch_index: 0,
            batch_size: 64,
            acc: 0.5,
            acc_pre: 0.4,
            acc_post: Some(0.5),
            n_selected: 10,
            n_selected_final: Some(12),
            n_prs: 2,
            mean_entropy_pre: 1.0,
            mean_entropy_post: Some(0.9),
            mean_grad_norm: 0.01,
            forwards: 3,
            backwards: 40,
            prs_count: Some(2),
            prs_correct: Some(2),
            group1_count: Some(5),
            group1_correct: Some(3),
            group2_count: Some(3),
            group2_correct: Some(1),
        }
    }

    #[test]
    fn roundtrip() {
        let records = vec![Record::Batch(sample_batch())];
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        let parsed = read_records(&mut &buf[..]).unwrap();
        assert_eq!(parsed.len(), 1);
        match &parsed[0] {
            Record::Batch(b) => assert_eq!(b.acc, 0.5),
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn unknown_schema_rejected() {
        let mut b = sample_batch();
        b.schema_version = 99;
        let mut buf = Vec::new();
        write_records(&[Record::Batch(b)], &mut buf).unwrap();
        assert!(read_records(&mut &buf[..]).is_err());
    }
}
