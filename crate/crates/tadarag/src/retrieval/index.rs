//! Immutable vector index over chunk embeddings with a versioned binary
//! persistence format ("TADX").

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::embed::{cosine, l2_normalize, term_counts, EmbedConfig};
use super::{chunk_document, Chunk, DocumentStore, RetrievalError};

pub const INDEX_MAGIC: &[u8; 4] = b"TADX";
const INDEX_VERSION: u32 = 1;

pub struct VectorIndex {
    dim: usize,
    normalized: bool,
    use_idf: bool,
    idf: Vec<f32>,
    chunks: Vec<Chunk>,
}

impl VectorIndex {
    /// Chunks every document and embeds the chunks. With IDF enabled, raw
    /// term counts are reweighted by ln(1 + N/(1+df)) before normalization.
    pub fn build(
        store: &DocumentStore,
        chunk_size: usize,
        overlap: usize,
        cfg: &EmbedConfig,
    ) -> Result<Self, RetrievalError> {
        let mut chunks = Vec::new();
        for doc in store.docs() {
            chunks.extend(chunk_document(doc, chunk_size, overlap, cfg)?);
        }
        let mut idf = vec![1.0f32; cfg.dim];
        if cfg.use_idf {
            let mut df = vec![0u32; cfg.dim];
            for c in &chunks {
                let counts = term_counts(&c.text, cfg.dim);
                for (slot, &count) in df.iter_mut().zip(&counts) {
                    if count > 0.0 {
                        *slot += 1;
                    }
                }
            }
            let n = chunks.len() as f32;
            for (w, &d) in idf.iter_mut().zip(&df) {
                *w = (1.0 + n / (1.0 + d as f32)).ln();
            }
        }
        for c in chunks.iter_mut() {
            let mut values = term_counts(&c.text, cfg.dim);
            if cfg.use_idf {
                for (v, &w) in values.iter_mut().zip(&idf) {
                    *v *= w;
                }
            }
            l2_normalize(&mut values);
            c.embedding = values;
        }
        Ok(VectorIndex {
            dim: cfg.dim,
            normalized: true,
            use_idf: cfg.use_idf,
            idf,
            chunks,
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    /// Embeds a query consistently with the stored chunks.
    pub fn embed_query(&self, query: &str) -> Vec<f32> {
        let mut values = term_counts(query, self.dim);
        if self.use_idf {
            for (v, &w) in values.iter_mut().zip(&self.idf) {
                *v *= w;
            }
        }
        l2_normalize(&mut values);
        values
    }

    /// The k highest-cosine chunks, ties broken by (doc_id, chunk_index)
    /// ascending; fewer than k when the index is smaller.
    pub fn top_k(&self, query: &str, k: usize) -> Result<Vec<&Chunk>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::Parameter("k must be at least 1".into()));
        }
        let q = self.embed_query(query);
        // bounded max-heap of the k best candidates (heap root = worst kept)
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
        for (i, c) in self.chunks.iter().enumerate() {
            heap.push(HeapEntry {
                score: cosine(&q, &c.embedding),
                doc_id: &c.doc_id,
                chunk_index: c.chunk_index,
                slot: i,
            });
            if heap.len() > k {
                heap.pop();
            }
        }
        let mut kept: Vec<HeapEntry> = heap.into_vec();
        kept.sort_by(|a, b| rank_order(a, b));
        Ok(kept.into_iter().map(|e| &self.chunks[e.slot]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.normalized as u8, self.use_idf as u8])?;
        for v in &self.idf {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.chunks.len() as u32).to_le_bytes())?;
        for c in &self.chunks {
            write_str(&mut w, &c.doc_id)?;
            w.write_all(&(c.chunk_index as u32).to_le_bytes())?;
            write_str(&mut w, &c.text)?;
            w.write_all(&(c.token_span.0 as u32).to_le_bytes())?;
            w.write_all(&(c.token_span.1 as u32).to_le_bytes())?;
            for v in &c.embedding {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(RetrievalError::Format(format!(
                "bad magic {magic:?}, expected {INDEX_MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(RetrievalError::Format(format!(
                "unsupported index version {version}"
            )));
        }
        let dim = read_u32(&mut r)? as usize;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let mut idf = vec![0.0f32; dim];
        read_f32s(&mut r, &mut idf)?;
        let count = read_u32(&mut r)? as usize;
        let mut chunks = Vec::with_capacity(count);
        for _ in 0..count {
            let doc_id = read_str(&mut r)?;
            let chunk_index = read_u32(&mut r)? as usize;
            let text = read_str(&mut r)?;
            let s = read_u32(&mut r)? as usize;
            let e = read_u32(&mut r)? as usize;
            let mut embedding = vec![0.0f32; dim];
            read_f32s(&mut r, &mut embedding)?;
            chunks.push(Chunk {
                doc_id,
                chunk_index,
                text,
                token_span: (s, e),
                embedding,
            });
        }
        Ok(VectorIndex {
            dim,
            normalized: flags[0] != 0,
            use_idf: flags[1] != 0,
            idf,
            chunks,
        })
    }
}

struct HeapEntry<'a> {
    score: f32,
    doc_id: &'a str,
    chunk_index: usize,
    slot: usize,
}

/// Ranking order: higher score first, then (doc_id, chunk_index) ascending.
fn rank_order(a: &HeapEntry, b: &HeapEntry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(b.doc_id))
        .then_with(|| a.chunk_index.cmp(&b.chunk_index))
}

// Heap ordering: the root must be the entry to evict, i.e. the one ranked
// last, so the heap's "greatest" is the rank-order maximum.
impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        rank_order(self, other) == Ordering::Equal
    }
}
impl Eq for HeapEntry<'_> {}
impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(self, other)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, RetrievalError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, RetrievalError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| RetrievalError::Format("non-utf8 string".into()))
}

fn read_f32s<R: Read>(r: &mut R, out: &mut [f32]) -> Result<(), RetrievalError> {
    let mut buf = [0u8; 4];
    for v in out.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(docs: &[&str]) -> DocumentStore {
        let mut s = DocumentStore::new();
        for (i, d) in docs.iter().enumerate() {
            s.push(format!("d{i}/0"), d.to_string());
        }
        s
    }

    fn build(docs: &[&str]) -> VectorIndex {
        VectorIndex::build(&store(docs), 8, 2, &EmbedConfig::default()).unwrap()
    }

    #[test]
    fn query_equal_to_stored_chunk_ranks_first() {
        let idx = build(&["alpha beta gamma", "delta epsilon zeta", "eta theta iota"]);
        let top = idx.top_k("delta epsilon zeta", 2).unwrap();
        assert_eq!(top[0].text, "delta epsilon zeta");
    }

    #[test]
    fn k_larger_than_index_returns_all() {
        let idx = build(&["one two", "three four"]);
        let top = idx.top_k("one", 50).unwrap();
        assert_eq!(top.len(), idx.len());
    }

    #[test]
    fn scores_are_non_increasing() {
        let idx = build(&[
            "apples and oranges",
            "apples only here",
            "completely different words",
            "oranges apples apples",
        ]);
        let q = idx.embed_query("apples oranges");
        let top = idx.top_k("apples oranges", 4).unwrap();
        let scores: Vec<f32> = top.iter().map(|c| cosine(&q, &c.embedding)).collect();
        for w in scores.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn empty_index_returns_empty() {
        let idx = build(&[]);
        assert!(idx.top_k("anything", 3).unwrap().is_empty());
        assert!(idx.top_k("anything", 0).is_err());
    }

    #[test]
    fn ties_break_by_doc_id_then_chunk_index() {
        // two identical documents -> identical scores; d0 must precede d1
        let idx = build(&["same words here", "same words here"]);
        let top = idx.top_k("same words", 2).unwrap();
        assert_eq!(top[0].doc_id, "d0/0");
        assert_eq!(top[1].doc_id, "d1/0");
    }

    #[test]
    fn heap_selection_matches_full_sort_scan() {
        // oracle: score everything, full sort, take k
        let docs: Vec<String> = (0..60)
            .map(|i| format!("word{} word{} shared filler", i % 7, i % 13))
            .collect();
        let doc_refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        let idx = build(&doc_refs);
        for k in [1, 3, 10] {
            let fast: Vec<(String, usize)> = idx
                .top_k("shared word3", k)
                .unwrap()
                .iter()
                .map(|c| (c.doc_id.clone(), c.chunk_index))
                .collect();
            let q = idx.embed_query("shared word3");
            let mut scored: Vec<(f32, &Chunk)> = idx
                .chunks()
                .iter()
                .map(|c| (cosine(&q, &c.embedding), c))
                .collect();
            scored.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then_with(|| a.1.doc_id.cmp(&b.1.doc_id))
                    .then_with(|| a.1.chunk_index.cmp(&b.1.chunk_index))
            });
            let slow: Vec<(String, usize)> = scored
                .into_iter()
                .take(k)
                .map(|(_, c)| (c.doc_id.clone(), c.chunk_index))
                .collect();
            assert_eq!(fast, slow, "k={k}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.tadx");
        let idx = build(&["alpha beta", "gamma delta"]);
        idx.save(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        assert_eq!(loaded.len(), idx.len());
        assert_eq!(loaded.dim(), idx.dim());
        for (a, b) in idx.chunks().iter().zip(loaded.chunks()) {
            assert_eq!(a, b);
        }
        // identical retrieval from the loaded index
        let a: Vec<String> = idx.top_k("alpha", 2).unwrap().iter().map(|c| c.text.clone()).collect();
        let b: Vec<String> = loaded.top_k("alpha", 2).unwrap().iter().map(|c| c.text.clone()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn idf_downweights_ubiquitous_terms() {
        let docs = [
            "shared rare1 unique-a",
            "shared rare2 unique-b",
            "shared rare3 unique-c",
            "shared rare4 unique-d",
        ];
        let mut s = DocumentStore::new();
        for (i, d) in docs.iter().enumerate() {
            s.push(format!("d{i}/0"), d.to_string());
        }
        let idx = VectorIndex::build(
            &s,
            8,
            0,
            &EmbedConfig {
                use_idf: true,
                ..EmbedConfig::default()
            },
        )
        .unwrap();
        // "shared rare2" should rank doc d1 first: rare2 dominates shared
        let top = idx.top_k("shared rare2", 1).unwrap();
        assert_eq!(top[0].doc_id, "d1/0");
    }
}
