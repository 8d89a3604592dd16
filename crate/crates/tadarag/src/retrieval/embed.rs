//! Hashed bag-of-words term-frequency embedding: deterministic,
//! dependency-free, and sufficient to reproduce chunk-fragmentation
//! retrieval behaviour.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub dim: usize,
    /// Inverse-document-frequency reweighting, applied at index build time.
    pub use_idf: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: 1024,
            use_idf: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
    /// False only for the zero vector of empty text, which cannot be
    /// normalized.
    pub normalized: bool,
}

/// FNV-1a over a word's bytes.
fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn hash_words(text: &str) -> impl Iterator<Item = u64> + '_ {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(fnv1a)
        .collect::<Vec<_>>()
        .into_iter()
}

/// Raw hashed term-frequency counts, before normalization.
pub(crate) fn term_counts(text: &str, dim: usize) -> Vec<f32> {
    let mut counts = vec![0.0f32; dim];
    for h in hash_words(text) {
        counts[(h % dim as u64) as usize] += 1.0;
    }
    counts
}

pub(crate) fn l2_normalize(values: &mut [f32]) -> bool {
    let norm: f64 = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    for v in values.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    true
}

/// L2-normalized hashed TF vector; empty text yields the zero vector
/// flagged unnormalizable.
pub fn embed(text: &str, cfg: &EmbedConfig) -> Embedding {
    let mut values = term_counts(text, cfg.dim);
    let normalized = l2_normalize(&mut values);
    Embedding { values, normalized }
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum::<f64>() as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_identical_vectors() {
        let cfg = EmbedConfig::default();
        assert_eq!(embed("a b c", &cfg), embed("a b c", &cfg));
    }

    #[test]
    fn nonempty_norm_is_one() {
        let cfg = EmbedConfig::default();
        let e = embed("some nonempty text", &cfg);
        assert!(e.normalized);
        let n: f64 = e.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_text_is_flagged_zero_vector() {
        let cfg = EmbedConfig::default();
        let e = embed("", &cfg);
        assert!(!e.normalized);
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_words_score_higher_than_disjoint() {
        // hand-computable: "a b" vs "a b c" share 2 of 2/3 words, vs "x y z"
        // share none; hashed TF cosine must respect that ordering
        let cfg = EmbedConfig::default();
        let q = embed("a b", &cfg);
        let near = embed("a b c", &cfg);
        let far = embed("x y z", &cfg);
        let c_near = cosine(&q.values, &near.values);
        let c_far = cosine(&q.values, &far.values);
        assert!((c_near - (2.0 / (2.0f32 * 3.0).sqrt())).abs() < 1e-5);
        assert!(c_near > c_far);
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        let cfg = EmbedConfig::default();
        assert_eq!(embed("Hello, World!", &cfg), embed("hello world", &cfg));
    }
}
