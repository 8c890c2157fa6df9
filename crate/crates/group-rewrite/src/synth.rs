//! Synthetic group-alignment task data.
//!
//! Each sample is 6-10 sentences of 4-8 uniform-random vocabulary tokens;
//! the reference summary copies K in {2, 3} distinct sentences verbatim in a
//! random order, recorded as the extraction. Since summary order is random,
//! the correct output is recoverable only through the group tags, never
//! from sentence position alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::RawSample;

/// Number of distinct words in the generator vocabulary.
pub const SYNTH_WORDS: usize = 40;

pub fn synth_word(i: usize) -> String {
    format!("tok{i:02}")
}

fn random_sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.gen_range(4..=8);
    (0..len).map(|_| synth_word(rng.gen_range(0..SYNTH_WORDS))).collect()
}

/// True when `needle` is a (token-level) subsequence of `haystack`.
fn is_subsequence(needle: &[String], haystack: &[String]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Generates `count` samples deterministically from `seed`. Documents are
/// resampled until no sentence is a subsequence of another, which keeps the
/// planted extraction uniquely recoverable by ROUGE matching.
pub fn gen_synthetic(count: usize, seed: u64) -> Vec<RawSample> {
    assert!(count >= 1, "count must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for n in 0..count {
        let num_sentences = rng.gen_range(6..=10);
        let mut sentences: Vec<Vec<String>> = Vec::with_capacity(num_sentences);
        while sentences.len() < num_sentences {
            let cand = random_sentence(&mut rng);
            let clashes = sentences
                .iter()
                .any(|s| is_subsequence(s, &cand) || is_subsequence(&cand, s));
            if !clashes {
                sentences.push(cand);
            }
        }
        let k = rng.gen_range(2..=3usize);
        let mut picks: Vec<usize> = (0..num_sentences).collect();
        picks.shuffle(&mut rng);
        picks.truncate(k);
        // `picks` is already a uniformly random permutation of the chosen set
        let summary: Vec<String> = picks.iter().map(|&i| sentences[i].join(" ")).collect();
        samples.push(RawSample {
            id: format!("synth-{n}"),
            document: sentences.into_iter().map(|s| s.join(" ")).collect(),
            summary,
            extraction: Some(picks),
        });
    }
    samples
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, SummarySample};
    use crate::oracle::label_extractions;

    #[test]
    fn generation_is_reproducible() {
        assert_eq!(gen_synthetic(25, 9), gen_synthetic(25, 9));
        assert_ne!(gen_synthetic(25, 9), gen_synthetic(25, 10));
    }

    #[test]
    fn summaries_copy_two_or_three_sentences_verbatim() {
        for s in gen_synthetic(50, 3) {
            let k = s.summary.len();
            assert!(k == 2 || k == 3);
            let extraction = s.extraction.as_ref().unwrap();
            assert_eq!(extraction.len(), k);
            for (slot, &idx) in extraction.iter().enumerate() {
                assert_eq!(s.summary[slot], s.document[idx], "verbatim copy");
            }
        }
    }

    #[test]
    fn document_shape_is_in_range() {
        for s in gen_synthetic(30, 4) {
            assert!((6..=10).contains(&s.document.len()));
            for sentence in &s.document {
                let words = sentence.split_whitespace().count();
                assert!((4..=8).contains(&words));
            }
        }
    }

    #[test]
    fn oracle_labeling_recovers_planted_extraction() {
        let raws = gen_synthetic(60, 5);
        let vocab = build_vocab(&raws, 256, 1).unwrap();
        for raw in &raws {
            let sample = SummarySample::from_raw(raw, &vocab).unwrap();
            let found = label_extractions(&sample).unwrap();
            assert_eq!(
                found.indices(),
                raw.extraction.as_ref().unwrap().as_slice(),
                "sample {}",
                raw.id
            );
        }
    }

    #[test]
    fn many_samples_have_non_document_order() {
        let raws = gen_synthetic(200, 6);
        let permuted = raws
            .iter()
            .filter(|r| {
                let e = r.extraction.as_ref().unwrap();
                let mut sorted = e.clone();
                sorted.sort_unstable();
                sorted != *e
            })
            .count();
        assert!(permuted > 80, "only {permuted} of 200 are order-permuted");
    }
}
