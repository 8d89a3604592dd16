//! Corpus and dataset records exchanged through JSONL files.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::intent::Annotations;

/// One JSONL record. Ingestion needs `id` and `documents`; training needs
/// `question`/`answer` and, for supervised extraction, `gold_graph` in the
/// tuple text format. `annotations` carries synthetic-corpus span
/// annotations for building gold graphs offline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default)]
    pub documents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_graph: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Annotations>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Reads a JSONL file, reporting the line number of the first malformed
/// record.
pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>, DataError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut f, rec).map_err(|e| DataError::Malformed {
            line: 0,
            reason: e.to_string(),
        })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let recs = vec![CorpusRecord {
            id: "r1".into(),
            question: Some("q?".into()),
            documents: vec!["d1".into(), "d2".into()],
            answer: Some("a".into()),
            gold_graph: None,
            domain: Some("news".into()),
            annotations: None,
            metric: None,
        }];
        write_jsonl(&path, &recs).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].id, "r1");
        assert_eq!(back[0].documents.len(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"ok\", \"documents\": []}\nnot json\n").unwrap();
        let err = read_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_fields_are_tolerated_in_corpus_records() {
        let rec: CorpusRecord =
            serde_json::from_str("{\"id\": \"x\", \"documents\": [], \"extra\": 1}").unwrap();
        assert_eq!(rec.id, "x");
    }
}
