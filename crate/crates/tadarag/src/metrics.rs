//! Answer metrics: bag-of-tokens F1 and LCS-based ROUGE-L.
//!
//! Both metrics share one normalization (lowercase, punctuation to
//! spaces, collapsed whitespace) so mode comparisons stay fair. An empty
//! normalized gold is a per-example metric error, reported and excluded
//! from aggregates; an empty prediction scores zero.

use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("gold answer is empty after normalization")]
    EmptyGold,
}

/// Lowercase, strip punctuation to spaces, collapse whitespace, split.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

fn counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Bag-overlap F1: precision and recall over token multisets, harmonic
/// mean.
pub fn token_f1(prediction: &str, gold: &str) -> Result<f32, MetricError> {
    let p = normalize_tokens(prediction);
    let g = normalize_tokens(gold);
    if g.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let pc = counts(&p);
    let gc = counts(&g);
    let common: usize = pc
        .iter()
        .map(|(tok, &n)| n.min(gc.get(tok).copied().unwrap_or(0)))
        .sum();
    if common == 0 {
        return Ok(0.0);
    }
    let precision = common as f32 / p.len() as f32;
    let recall = common as f32 / g.len() as f32;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Longest common subsequence length via the classic DP table.
fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![0usize; m + 1];
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        for j in 1..=m {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.iter_mut().for_each(|v| *v = 0);
    }
    prev[m]
}

/// ROUGE-L: LCS precision and recall with equal-weight harmonic mean.
pub fn rouge_l(prediction: &str, gold: &str) -> Result<f32, MetricError> {
    let p = normalize_tokens(prediction);
    let g = normalize_tokens(gold);
    if g.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    if p.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(&p, &g);
    if lcs == 0 {
        return Ok(0.0);
    }
    let precision = lcs as f32 / p.len() as f32;
    let recall = lcs as f32 / g.len() as f32;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_strings_score_one() {
        assert_eq!(token_f1("exact match", "exact match").unwrap(), 1.0);
        assert_eq!(rouge_l("exact match", "exact match").unwrap(), 1.0);
    }

    #[test]
    fn disjoint_bags_score_zero() {
        assert_eq!(token_f1("aa bb", "cc dd").unwrap(), 0.0);
        assert_eq!(rouge_l("aa bb", "cc dd").unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_f1() {
        // pred "the cat sat", gold "the cat": P = 2/3, R = 1 -> 0.8
        let f1 = token_f1("the cat sat", "the cat").unwrap();
        assert!((f1 - 0.8).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_rouge() {
        // LCS("a b c d", "a c d e") = 3 -> P = R = 3/4 -> 0.75
        let r = rouge_l("a b c d", "a c d e").unwrap();
        assert!((r - 0.75).abs() < 1e-6);
    }

    #[test]
    fn empty_prediction_scores_zero_empty_gold_errors() {
        assert_eq!(token_f1("", "gold").unwrap(), 0.0);
        assert_eq!(rouge_l("", "gold").unwrap(), 0.0);
        assert_eq!(token_f1("pred", "...").unwrap_err(), MetricError::EmptyGold);
        assert_eq!(rouge_l("pred", "").unwrap_err(), MetricError::EmptyGold);
    }

    #[test]
    fn normalization_is_shared_and_case_insensitive() {
        assert_eq!(token_f1("The CAT!", "the cat").unwrap(), 1.0);
        assert_eq!(rouge_l("The, cat.", "the cat").unwrap(), 1.0);
    }

    #[test]
    fn multiset_counting_matters() {
        // pred has one "a", gold has two: common = 1, P = 1, R = 1/2
        let f1 = token_f1("a", "a a").unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-6);
    }

    /// Brute-force reference: recursive memoized LCS, structured
    /// differently from the DP implementation.
    fn lcs_recursive(a: &[String], b: &[String]) -> usize {
        fn go(
            a: &[String],
            b: &[String],
            i: usize,
            j: usize,
            memo: &mut std::collections::HashMap<(usize, usize), usize>,
        ) -> usize {
            if i == a.len() || j == b.len() {
                return 0;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let v = if a[i] == b[j] {
                1 + go(a, b, i + 1, j + 1, memo)
            } else {
                go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
            };
            memo.insert((i, j), v);
            v
        }
        go(a, b, 0, 0, &mut std::collections::HashMap::new())
    }

    proptest! {
        #[test]
        fn lcs_matches_recursive_reference(
            a in proptest::collection::vec("[abc]", 0..12),
            b in proptest::collection::vec("[abc]", 0..12),
        ) {
            let av: Vec<String> = a;
            let bv: Vec<String> = b;
            prop_assert_eq!(lcs_len(&av, &bv), lcs_recursive(&av, &bv));
        }

        #[test]
        fn f1_is_symmetric_in_range(a in "[a-c ]{0,16}", b in "[a-c ]{1,16}") {
            prop_assume!(!normalize_tokens(&b).is_empty());
            let f = token_f1(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            if !normalize_tokens(&a).is_empty() {
                let g = token_f1(&b, &a).unwrap();
                prop_assert!((f - g).abs() < 1e-6);
            }
        }
    }
}
