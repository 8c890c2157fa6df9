//! Gold-standard extraction labeling: each reference summary sentence is
//! matched to its best document sentence, greedily and without replacement,
//! so the number of extracted sentences always equals the summary length.

use thiserror::Error;

use crate::corpus::SummarySample;
use crate::rouge::oracle_score;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("summary has {summary} sentences but the document only {document}")]
    NotEnoughSentences { summary: usize, document: usize },
    #[error("extraction index {index} out of range for {num_sentences} document sentences")]
    IndexOutOfRange { index: usize, num_sentences: usize },
    #[error("extraction contains duplicate index {index}")]
    DuplicateIndex { index: usize },
}

/// Ordered document-sentence indices: position k holds the match for summary
/// sentence k. Indices are pairwise distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    indices: Vec<usize>,
}

impl Extraction {
    pub fn new(indices: Vec<usize>, num_doc_sentences: usize) -> Result<Self, OracleError> {
        let mut seen = vec![false; num_doc_sentences];
        for &i in &indices {
            if i >= num_doc_sentences {
                return Err(OracleError::IndexOutOfRange { index: i, num_sentences: num_doc_sentences });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(OracleError::DuplicateIndex { index: i });
            }
        }
        Ok(Extraction { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn num_groups(&self) -> usize {
        self.indices.len()
    }

    /// Same indices reordered by document position (the inference-time
    /// group order).
    pub fn in_document_order(&self) -> Extraction {
        let mut indices = self.indices.clone();
        indices.sort_unstable();
        Extraction { indices }
    }
}

/// Per-sentence 0/1 labels over the document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceLabels {
    pub labels: Vec<u8>,
}

impl SentenceLabels {
    pub fn num_selected(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Greedy matching in summary-sentence order: each summary sentence takes
/// the not-yet-taken document sentence with the highest average
/// ROUGE-1/2/L recall; ties break toward the lowest document index.
pub fn label_extractions(sample: &SummarySample) -> Result<Extraction, OracleError> {
    if sample.summary.len() > sample.document.len() {
        return Err(OracleError::NotEnoughSentences {
            summary: sample.summary.len(),
            document: sample.document.len(),
        });
    }
    let doc_words: Vec<Vec<String>> = sample.document.iter().map(|s| s.words()).collect();
    let mut taken = vec![false; sample.document.len()];
    let mut indices = Vec::with_capacity(sample.summary.len());
    for summary_sentence in &sample.summary {
        let ref_words = summary_sentence.words();
        let mut best: Option<(usize, f64)> = None;
        for (i, cand) in doc_words.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let score = oracle_score(cand, &ref_words);
            let better = match best {
                None => true,
                Some((_, best_score)) => score > best_score,
            };
            if better {
                best = Some((i, score));
            }
        }
        let (i, _) = best.expect("document has at least one free sentence");
        taken[i] = true;
        indices.push(i);
    }
    Ok(Extraction { indices })
}

/// Converts an extraction into 0/1 labels over the document sentences.
pub fn extraction_to_labels(
    extraction: &Extraction,
    num_doc_sentences: usize,
) -> Result<SentenceLabels, OracleError> {
    let mut labels = vec![0u8; num_doc_sentences];
    for &i in extraction.indices() {
        if i >= num_doc_sentences {
            return Err(OracleError::IndexOutOfRange { index: i, num_sentences: num_doc_sentences });
        }
        labels[i] = 1;
    }
    Ok(SentenceLabels { labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, RawSample, SummarySample};
    use crate::rouge::oracle_score;

    fn sample(doc: &[&str], summary: &[&str]) -> SummarySample {
        let raw = RawSample {
            id: "t".into(),
            document: doc.iter().map(|s| s.to_string()).collect(),
            summary: summary.iter().map(|s| s.to_string()).collect(),
            extraction: None,
        };
        let vocab = build_vocab(std::slice::from_ref(&raw), 512, 1).unwrap();
        SummarySample::from_raw(&raw, &vocab).unwrap()
    }

    #[test]
    fn verbatim_copy_matches_its_source() {
        let s = sample(
            &["alpha beta gamma", "delta epsilon", "zeta eta theta", "iota kappa lambda mu"],
            &["iota kappa lambda mu"],
        );
        let e = label_extractions(&s).unwrap();
        assert_eq!(e.indices(), &[3]);
    }

    #[test]
    fn document_equal_to_summary_maps_identically() {
        let s = sample(
            &["alpha beta", "gamma delta", "epsilon zeta"],
            &["alpha beta", "gamma delta", "epsilon zeta"],
        );
        let e = label_extractions(&s).unwrap();
        assert_eq!(e.indices(), &[0, 1, 2]);
    }

    #[test]
    fn collision_takes_next_best_without_replacement() {
        // both summary sentences match document sentence 0 best; the second
        // must settle for its next-best (sentence 1, sharing "beta")
        let s = sample(
            &["alpha beta gamma", "beta delta", "zeta eta"],
            &["alpha beta gamma", "alpha beta delta"],
        );
        let e = label_extractions(&s).unwrap();
        assert_eq!(e.indices()[0], 0);
        assert_eq!(e.indices().len(), 2);
        assert_ne!(e.indices()[1], 0, "sentence 0 is already taken");
        // brute-force the claim: among the remaining candidates, the chosen
        // one maximizes the oracle score against summary sentence 2
        let ref_words = s.summary[1].words();
        let chosen = oracle_score(&s.document[e.indices()[1]].words(), &ref_words);
        for (i, d) in s.document.iter().enumerate() {
            if i != 0 {
                assert!(chosen >= oracle_score(&d.words(), &ref_words) - 1e-12);
            }
        }
        assert_eq!(e.indices()[1], 1);
    }

    #[test]
    fn ties_break_to_lowest_document_index() {
        let s = sample(
            &["alpha beta", "gamma delta", "alpha beta"],
            &["alpha beta"],
        );
        let e = label_extractions(&s).unwrap();
        assert_eq!(e.indices(), &[0]);
    }

    #[test]
    fn extraction_length_equals_summary_length() {
        let s = sample(
            &["alpha beta", "gamma delta", "epsilon", "zeta eta"],
            &["alpha", "zeta"],
        );
        let e = label_extractions(&s).unwrap();
        assert_eq!(e.num_groups(), s.summary.len());
        // pairwise distinct
        let mut sorted = e.indices().to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), e.num_groups());
    }

    #[test]
    fn more_summary_than_document_is_an_error() {
        let s = sample(&["alpha beta"], &["alpha", "beta"]);
        assert!(matches!(
            label_extractions(&s),
            Err(OracleError::NotEnoughSentences { .. })
        ));
    }

    #[test]
    fn greedy_step_scores_hold_a_certificate() {
        let s = sample(
            &[
                "one two three four",
                "five six seven",
                "two three eight",
                "nine ten",
                "four five ten",
            ],
            &["one two three", "four five ten", "nine"],
        );
        let e = label_extractions(&s).unwrap();
        // re-walk the greedy process; each matched score must be >= the
        // score of any sentence still unmatched at that step
        let mut taken = vec![false; s.document.len()];
        for (k, &idx) in e.indices().iter().enumerate() {
            let ref_words = s.summary[k].words();
            let matched = oracle_score(&s.document[idx].words(), &ref_words);
            for (i, d) in s.document.iter().enumerate() {
                if !taken[i] {
                    assert!(
                        matched >= oracle_score(&d.words(), &ref_words) - 1e-12,
                        "step {k}: {i} would beat {idx}"
                    );
                }
            }
            taken[idx] = true;
        }
    }

    #[test]
    fn labels_from_extraction() {
        let e = Extraction::new(vec![2, 0], 4).unwrap();
        let l = extraction_to_labels(&e, 4).unwrap();
        assert_eq!(l.labels, vec![1, 0, 1, 0]);
        assert_eq!(l.num_selected(), 2);
    }

    #[test]
    fn labels_cover_all_and_single() {
        let all = Extraction::new(vec![0, 1, 2], 3).unwrap();
        assert_eq!(extraction_to_labels(&all, 3).unwrap().labels, vec![1, 1, 1]);
        let one = Extraction::new(vec![0], 1).unwrap();
        assert_eq!(extraction_to_labels(&one, 1).unwrap().labels, vec![1]);
    }

    #[test]
    fn labels_out_of_range_is_an_error() {
        let e = Extraction::new(vec![1], 5).unwrap();
        assert!(matches!(
            extraction_to_labels(&e, 1),
            Err(OracleError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn extraction_rejects_duplicates_and_out_of_range() {
        assert!(matches!(
            Extraction::new(vec![0, 0], 3),
            Err(OracleError::DuplicateIndex { .. })
        ));
        assert!(matches!(
            Extraction::new(vec![7], 3),
            Err(OracleError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn document_order_sorts_indices() {
        let e = Extraction::new(vec![4, 0, 2], 6).unwrap();
        assert_eq!(e.in_document_order().indices(), &[0, 2, 4]);
    }
}
