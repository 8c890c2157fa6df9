//! ROUGE-1/2/L used for oracle labeling, evaluation and analysis.
//!
//! Counts are clipped (multiset intersection) for ROUGE-n; ROUGE-L uses the
//! longest common subsequence. No stemming or stopword handling.

use std::collections::HashMap;
use std::hash::Hash;

/// Recall/precision/F1 triple, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_overlap(overlap: f64, cand_total: f64, ref_total: f64) -> Self {
        let precision = if cand_total > 0.0 { overlap / cand_total } else { 0.0 };
        let recall = if ref_total > 0.0 { overlap / ref_total } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore { recall, precision, f1 }
    }
}

/// Clipped n-gram overlap. A side with fewer than `n` tokens contributes no
/// n-grams, and the corresponding ratio is defined as 0.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand_count = candidate.len().saturating_sub(n - 1);
    let ref_count = reference.len().saturating_sub(n - 1);
    if cand_count == 0 || ref_count == 0 {
        return RougeScore::from_overlap(0.0, cand_count as f64, ref_count as f64);
    }
    let mut ref_grams: HashMap<&[T], usize> = HashMap::new();
    for gram in reference.windows(n) {
        *ref_grams.entry(gram).or_default() += 1;
    }
    let mut overlap = 0usize;
    for gram in candidate.windows(n) {
        if let Some(count) = ref_grams.get_mut(gram) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    RougeScore::from_overlap(overlap as f64, cand_count as f64, ref_count as f64)
}

/// Longest-common-subsequence ROUGE.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::default();
    }
    let lcs = lcs_len(candidate, reference) as f64;
    RougeScore::from_overlap(lcs, candidate.len() as f64, reference.len() as f64)
}

/// LCS length by dynamic programming, O(|a|*|b|) with two rows.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for av in a {
        for (j, bv) in b.iter().enumerate() {
            cur[j + 1] = if av == bv {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Matching score for oracle extraction: the average recall of
/// ROUGE-1, ROUGE-2 and ROUGE-L.
pub fn oracle_score<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    let r1 = rouge_n(candidate, reference, 1).recall;
    let r2 = rouge_n(candidate, reference, 2).recall;
    let rl = rouge_l(candidate, reference).recall;
    (r1 + r2 + rl) / 3.0
}

#[cfg(test)]
pub(crate) mod brute {
    //! Independent oracles: quadratic matching for n-gram overlap and
    //! exhaustive all-subsequence search for the LCS. Only usable for short
    //! sequences.

    use super::RougeScore;
    use std::hash::Hash;

    pub fn rouge_n_brute<T: Eq + Hash + Clone>(
        candidate: &[T],
        reference: &[T],
        n: usize,
    ) -> RougeScore {
        let cand: Vec<&[T]> = candidate.windows(n).collect();
        let refs: Vec<&[T]> = reference.windows(n).collect();
        let mut used = vec![false; refs.len()];
        let mut overlap = 0usize;
        for gram in &cand {
            for (j, r) in refs.iter().enumerate() {
                if !used[j] && gram == r {
                    used[j] = true;
                    overlap += 1;
                    break;
                }
            }
        }
        RougeScore::from_overlap(overlap as f64, cand.len() as f64, refs.len() as f64)
    }

    fn is_subsequence<T: Eq>(needle: &[T], haystack: &[T]) -> bool {
        let mut it = haystack.iter();
        needle.iter().all(|n| it.any(|h| h == n))
    }

    /// LCS by enumerating every subsequence of the shorter side.
    pub fn lcs_brute<T: Eq>(a: &[T], b: &[T]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        assert!(short.len() <= 16, "exhaustive search only for short inputs");
        let mut best = 0usize;
        for mask in 0u32..(1 << short.len()) {
            let picked: Vec<&T> =
                short.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, v)| v).collect();
            if picked.len() > best {
                let long_refs: Vec<&T> = long.iter().collect();
                if is_subsequence(&picked, &long_refs) {
                    best = picked.len();
                }
            }
        }
        best
    }

    pub fn rouge_l_brute<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
        if candidate.is_empty() || reference.is_empty() {
            return RougeScore::default();
        }
        let lcs = lcs_brute(candidate, reference) as f64;
        RougeScore::from_overlap(lcs, candidate.len() as f64, reference.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_1_worked_example() {
        let score = rouge_n(&toks("the cat sat"), &toks("the cat ran"), 1);
        assert!((score.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((score.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((score.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_2_identity() {
        let x = toks("a b c d");
        let score = rouge_n(&x, &x, 2);
        assert_eq!((score.recall, score.precision, score.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn rouge_2_disjoint_is_zero() {
        let score = rouge_n(&toks("a b"), &toks("c d"), 2);
        assert_eq!((score.recall, score.precision, score.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rouge_n_too_short_side_scores_zero() {
        let score = rouge_n(&toks("a"), &toks("a b c"), 2);
        assert_eq!(score.precision, 0.0);
        assert_eq!(score.recall, 0.0);
    }

    #[test]
    fn rouge_n_clips_repeated_grams() {
        // candidate repeats "a" three times, reference has it twice
        let score = rouge_n(&toks("a a a"), &toks("a a b"), 1);
        assert!((score.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((score.recall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_worked_example() {
        let score = rouge_l(&toks("a b c d"), &toks("a c d"));
        assert!((score.recall - 1.0).abs() < 1e-12);
        assert!((score.precision - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_identity_and_empty() {
        let x = toks("a b c");
        let id = rouge_l(&x, &x);
        assert_eq!((id.recall, id.precision, id.f1), (1.0, 1.0, 1.0));
        let empty: Vec<&str> = vec![];
        assert_eq!(rouge_l(&empty, &x), RougeScore::default());
        assert_eq!(rouge_l(&x, &empty), RougeScore::default());
    }

    #[test]
    fn oracle_score_identity_and_disjoint() {
        let x = toks("a b c");
        assert!((oracle_score(&x, &x) - 1.0).abs() < 1e-12);
        assert_eq!(oracle_score(&toks("a b"), &toks("c d")), 0.0);
    }

    #[test]
    fn oracle_score_worked_example() {
        // R1 = 2/3, R2 = 1/2, RL = 2/3 -> mean 11/18
        let score = oracle_score(&toks("a b c"), &toks("a b d"));
        assert!((score - 11.0 / 18.0).abs() < 1e-12, "{score}");
    }

    #[test]
    fn matches_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let len_a = rng.gen_range(0..=12);
            let len_b = rng.gen_range(0..=12);
            let a: Vec<u8> = (0..len_a).map(|_| rng.gen_range(0..5)).collect();
            let b: Vec<u8> = (0..len_b).map(|_| rng.gen_range(0..5)).collect();
            for n in 1..=3 {
                let fast = rouge_n(&a, &b, n);
                let slow = brute::rouge_n_brute(&a, &b, n);
                assert!((fast.recall - slow.recall).abs() < 1e-12);
                assert!((fast.precision - slow.precision).abs() < 1e-12);
                assert!((fast.f1 - slow.f1).abs() < 1e-12);
            }
            let fast = rouge_l(&a, &b);
            let slow = brute::rouge_l_brute(&a, &b);
            assert!((fast.recall - slow.recall).abs() < 1e-12);
            assert!((fast.precision - slow.precision).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn identity_scores_one(x in proptest::collection::vec(0u8..6, 2..20)) {
            for n in 1..=2 {
                let s = rouge_n(&x, &x, n);
                prop_assert!((s.recall - 1.0).abs() < 1e-12);
                prop_assert!((s.precision - 1.0).abs() < 1e-12);
                prop_assert!((s.f1 - 1.0).abs() < 1e-12);
            }
            let s = rouge_l(&x, &x);
            prop_assert!((s.f1 - 1.0).abs() < 1e-12);
        }

        #[test]
        fn recall_monotone_when_candidate_grows(
            cand in proptest::collection::vec(0u8..6, 0..10),
            refs in proptest::collection::vec(0u8..6, 1..10),
            extra in 1usize..8,
        ) {
            // appending reference tokens to the candidate never lowers recall
            let mut grown = cand.clone();
            grown.extend(refs.iter().take(extra).cloned());
            for n in 1..=2 {
                prop_assert!(rouge_n(&grown, &refs, n).recall >= rouge_n(&cand, &refs, n).recall - 1e-12);
            }
            prop_assert!(rouge_l(&grown, &refs).recall >= rouge_l(&cand, &refs).recall - 1e-12);
        }

        #[test]
        fn scores_stay_in_unit_interval(
            a in proptest::collection::vec(0u8..4, 0..12),
            b in proptest::collection::vec(0u8..4, 0..12),
        ) {
            for s in [rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&s.recall));
                prop_assert!((0.0..=1.0).contains(&s.precision));
                prop_assert!((0.0..=1.0).contains(&s.f1));
            }
        }
    }
}
