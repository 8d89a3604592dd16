//! Corpus ingestion, token-window chunking, hashed bag-of-words
//! embedding, and top-k cosine retrieval. This is deliberately the plain
//! chunked-RAG setting: retrieved knowledge arrives as fixed-size
//! overlapping windows, fragmenting facts across chunk boundaries.

mod embed;
mod index;

pub use embed::{embed, EmbedConfig, Embedding};
pub use index::{VectorIndex, INDEX_MAGIC};

use std::collections::BTreeSet;
use std::path::Path;

use crate::data::{read_jsonl, DataError};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("index format: {0}")]
    Format(String),
}

#[derive(Debug, Clone)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// Documents with stable ids: record `r` contributes `r/0`, `r/1`, ...
#[derive(Debug, Clone, Default)]
pub struct DocumentStore {
    docs: Vec<Document>,
}

impl DocumentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: String, text: String) {
        self.docs.push(Document { id, text });
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Loads a corpus JSONL file into a document store. Record ids must be
/// unique; every document of a record is stored under `<id>/<index>`.
pub fn ingest(path: &Path) -> Result<DocumentStore, RetrievalError> {
    let records = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    let mut store = DocumentStore::new();
    for rec in records {
        if !seen.insert(rec.id.clone()) {
            return Err(RetrievalError::DuplicateId(rec.id));
        }
        for (i, doc) in rec.documents.iter().enumerate() {
            store.push(format!("{}/{}", rec.id, i), doc.clone());
        }
    }
    Ok(store)
}

/// One retrieval unit: a window of `chunk_size` word tokens advancing by
/// `chunk_size - overlap`, so consecutive chunks of a document share
/// exactly `overlap` tokens (except the final, possibly shorter one).
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
    pub token_span: (usize, usize),
    pub embedding: Vec<f32>,
}

/// Sliding word-token windows covering every token of the document.
pub fn chunk_spans(
    token_count: usize,
    chunk_size: usize,
    overlap: usize,
) -> Result<Vec<(usize, usize)>, RetrievalError> {
    if chunk_size == 0 {
        return Err(RetrievalError::Parameter("chunk_size must be positive".into()));
    }
    if overlap >= chunk_size {
        return Err(RetrievalError::Parameter(format!(
            "overlap {overlap} must be smaller than chunk_size {chunk_size}"
        )));
    }
    if token_count == 0 {
        return Ok(vec![]);
    }
    let stride = chunk_size - overlap;
    let mut spans = Vec::new();
    let mut start = 0usize;
    loop {
        let end = (start + chunk_size).min(token_count);
        spans.push((start, end));
        if end == token_count {
            return Ok(spans);
        }
        start += stride;
    }
}

/// Chunks one document; chunk text is the window's words joined by single
/// spaces.
pub fn chunk_document(
    doc: &Document,
    chunk_size: usize,
    overlap: usize,
    embed_cfg: &EmbedConfig,
) -> Result<Vec<Chunk>, RetrievalError> {
    let words: Vec<&str> = doc.text.split_whitespace().collect();
    let spans = chunk_spans(words.len(), chunk_size, overlap)?;
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(chunk_index, (s, e))| {
            let text = words[s..e].join(" ");
            let embedding = embed(&text, embed_cfg).values;
            Chunk {
                doc_id: doc.id.clone(),
                chunk_index,
                text,
                token_span: (s, e),
                embedding,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_jsonl, CorpusRecord};
    use proptest::prelude::*;

    fn record(id: &str, docs: &[&str]) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            question: None,
            documents: docs.iter().map(|s| s.to_string()).collect(),
            answer: None,
            gold_graph: None,
            domain: None,
            annotations: None,
            metric: None,
        }
    }

    #[test]
    fn empty_file_gives_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(ingest(&path).unwrap().is_empty());
    }

    #[test]
    fn two_document_record_stores_two_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &[record("r7", &["alpha", "beta"])]).unwrap();
        let store = ingest(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.docs()[0].id, "r7/0");
        assert_eq!(store.docs()[1].id, "r7/1");
    }

    #[test]
    fn duplicate_record_id_errors_with_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &[record("dup", &["a"]), record("dup", &["b"])]).unwrap();
        let err = ingest(&path).unwrap_err();
        assert!(err.to_string().contains("dup"), "{err}");
    }

    #[test]
    fn hand_enumerated_spans() {
        // 10 tokens, size 4, overlap 1 -> [0,4), [3,7), [6,10)
        let spans = chunk_spans(10, 4, 1).unwrap();
        assert_eq!(spans, vec![(0, 4), (3, 7), (6, 10)]);
    }

    #[test]
    fn short_document_is_one_chunk() {
        assert_eq!(chunk_spans(3, 8, 2).unwrap(), vec![(0, 3)]);
    }

    #[test]
    fn overlap_must_be_smaller_than_chunk() {
        assert!(chunk_spans(10, 4, 4).is_err());
        assert!(chunk_spans(10, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn spans_cover_every_token(
            tokens in 1usize..200,
            size in 1usize..32,
            overlap_frac in 0.0f64..0.99,
        ) {
            let overlap = ((size as f64) * overlap_frac) as usize;
            prop_assume!(overlap < size);
            let spans = chunk_spans(tokens, size, overlap).unwrap();
            let mut covered = vec![false; tokens];
            for (s, e) in &spans {
                prop_assert!(e - s <= size);
                for c in covered[*s..*e].iter_mut() {
                    *c = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            // consecutive chunks overlap by exactly `overlap` (except last)
            for w in spans.windows(2) {
                let ((s0, e0), (s1, _)) = (w[0], w[1]);
                if e0 - s0 == size {
                    prop_assert_eq!(e0.saturating_sub(s1), overlap);
                }
            }
        }
    }
}
