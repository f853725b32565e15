//! Edit-distance term matching.
//!
//! Candidate terms are found through a deletion-neighbourhood index (every
//! string reachable by up to `k` character deletions is hashed to the term it
//! came from); candidates are then verified with the exact Damerau–Levenshtein
//! distance.

use std::collections::{HashMap, HashSet};
use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

/// Upper bound on supported edit distance.
pub const MAX_EDITS: usize = 2;

pub fn damerau_levenshtein(a: &str, b: &str) -> usize {
    strsim::damerau_levenshtein(a, b)
}

/// Score multiplier for a term matched at edit distance `edits`.
pub fn fuzzy_multiplier(edits: usize) -> f64 {
    1.0 / (1.0 + edits as f64)
}

/// Edits allowed for a query token of `len` characters: none for very short
/// tokens, at most one up to five characters, `max_edits` beyond.
pub fn edits_for_length(len: usize, max_edits: usize) -> usize {
    let cap = match len {
        0..=2 => 0,
        3..=5 => 1,
        _ => MAX_EDITS,
    };
    cap.min(max_edits)
}

/// Vocabulary terms within Damerau–Levenshtein distance `max_edits` of
/// `term`, with their distances, sorted by (distance, term).
pub fn fuzzy_match_terms<'a, I>(term: &str, vocabulary: I, max_edits: usize) -> Vec<(String, usize)>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out: Vec<(String, usize)> = vocabulary
        .into_iter()
        .filter_map(|v| {
            let d = damerau_levenshtein(term, v);
            (d <= max_edits).then(|| (v.to_string(), d))
        })
        .collect();
    out.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    out.dedup();
    out
}

fn hash_str(s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

fn deletion_variants(term: &str, depth: usize) -> HashSet<String> {
    let mut out = HashSet::new();
    out.insert(term.to_string());
    let mut frontier = vec![term.to_string()];
    for _ in 0..depth {
        let mut next = Vec::new();
        for s in &frontier {
            let chars: Vec<char> = s.chars().collect();
            for i in 0..chars.len() {
                let v: String = chars
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, c)| *c)
                    .collect();
                if out.insert(v.clone()) {
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    out
}

/// Deletion-neighbourhood index over a term list (term ids are positions).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DeletionIndex {
    depth: usize,
    buckets: HashMap<u64, Vec<u32>>,
}

impl DeletionIndex {
    pub fn build<'a, I>(terms: I, depth: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let depth = depth.min(MAX_EDITS);
        let mut buckets: HashMap<u64, Vec<u32>> = HashMap::new();
        for (id, term) in terms.into_iter().enumerate() {
            for v in deletion_variants(term, depth) {
                let b = buckets.entry(hash_str(&v)).or_default();
                if b.last() != Some(&(id as u32)) {
                    b.push(id as u32);
                }
            }
        }
        DeletionIndex { depth, buckets }
    }

    /// Term ids within `edits` of `query` (verified), as `(id, distance)`.
    /// `term_of` resolves an id back to its text.
    pub fn lookup<'a, F>(&self, query: &str, edits: usize, term_of: F) -> Vec<(u32, usize)>
    where
        F: Fn(u32) -> &'a str,
    {
        let edits = edits.min(self.depth);
        let mut seen: HashSet<u32> = HashSet::new();
        let mut out = Vec::new();
        for v in deletion_variants(query, edits) {
            if let Some(ids) = self.buckets.get(&hash_str(&v)) {
                for &id in ids {
                    if seen.insert(id) {
                        let d = damerau_levenshtein(query, term_of(id));
                        if d <= edits {
                            out.push((id, d));
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distances() {
        assert_eq!(damerau_levenshtein("hemglobin", "hemoglobin"), 1);
        assert_eq!(damerau_levenshtein("abc", "xyz"), 3);
        assert_eq!(damerau_levenshtein("glcuose", "glucose"), 1);
        assert_eq!(damerau_levenshtein("", "ab"), 2);
    }

    #[test]
    fn match_terms_examples() {
        let m = fuzzy_match_terms("hemglobin", ["hemoglobin"], 1);
        assert_eq!(m, vec![("hemoglobin".to_string(), 1)]);
        let m = fuzzy_match_terms("glucose", ["glucose"], 0);
        assert_eq!(m, vec![("glucose".to_string(), 0)]);
        assert!(fuzzy_match_terms("abc", ["xyz"], 2).is_empty());
    }

    #[test]
    fn multiplier_is_graded() {
        assert_eq!(fuzzy_multiplier(0), 1.0);
        assert_eq!(fuzzy_multiplier(1), 0.5);
        assert!((fuzzy_multiplier(2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_rule() {
        assert_eq!(edits_for_length(2, 2), 0);
        assert_eq!(edits_for_length(4, 2), 1);
        assert_eq!(edits_for_length(9, 2), 2);
        assert_eq!(edits_for_length(9, 1), 1);
        assert_eq!(edits_for_length(9, 0), 0);
    }

    #[test]
    fn index_finds_transpositions_and_insertions() {
        let vocab = ["glucose", "hemoglobin", "sodium", "ggt"];
        let idx = DeletionIndex::build(vocab, 2);
        let hits = idx.lookup("glcuose", 1, |i| vocab[i as usize]);
        assert_eq!(hits, vec![(0, 1)]);
        let hits = idx.lookup("hemglobin", 2, |i| vocab[i as usize]);
        assert_eq!(hits, vec![(1, 1)]);
        assert!(idx.lookup("potassium", 2, |i| vocab[i as usize]).is_empty());
    }

    proptest! {
        #[test]
        fn index_agrees_with_brute_force(
            vocab in proptest::collection::vec("[a-e]{1,6}", 1..30),
            q in "[a-e]{1,6}",
            edits in 0usize..=2,
        ) {
            let idx = DeletionIndex::build(vocab.iter().map(String::as_str), 2);
            let got: HashSet<String> = idx
                .lookup(&q, edits, |i| vocab[i as usize].as_str())
                .into_iter()
                .map(|(i, _)| vocab[i as usize].clone())
                .collect();
            let want: HashSet<String> = fuzzy_match_terms(&q, vocab.iter().map(String::as_str), edits)
                .into_iter()
                .map(|(t, _)| t)
                .collect();
            prop_assert_eq!(got, want);
        }
    }
}
