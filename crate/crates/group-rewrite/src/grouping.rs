//! Group-tag assignment. A tag k links the k-th selected source sentence to
//! the k-th generated summary sentence; tag 0 marks untagged context.
//!
//! Group order differs by phase: training follows summary-sentence order
//! (group one is the match of the first summary sentence), inference follows
//! document position. [`Extraction`] carries the order either way.

use crate::corpus::{assemble_decoder_sequence, CorpusError, Sentence, TokenId, BOS_ID, SEP_ID};
use crate::oracle::{Extraction, OracleError};

/// Tags aligned 1:1 with a token sequence, values in `[0, k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupTags {
    pub tags: Vec<usize>,
    pub num_groups: usize,
}

/// Per-sentence source tags: sentence `extraction[k-1]` gets tag k, every
/// other sentence tag 0.
pub fn tag_source(doc: &[Sentence], extraction: &Extraction) -> Result<Vec<usize>, OracleError> {
    // re-validate against this document; Extraction guarantees distinctness
    let mut tags = vec![0usize; doc.len()];
    for (k, &idx) in extraction.indices().iter().enumerate() {
        if idx >= doc.len() {
            return Err(OracleError::IndexOutOfRange { index: idx, num_sentences: doc.len() });
        }
        if tags[idx] != 0 {
            return Err(OracleError::DuplicateIndex { index: idx });
        }
        tags[idx] = k + 1;
    }
    Ok(tags)
}

/// Target tags for a summary, token for token identical to the group-tag
/// stream of [`assemble_decoder_sequence`] (single source of truth).
pub fn tag_target(summary: &[Sentence]) -> Result<GroupTags, CorpusError> {
    let seq = assemble_decoder_sequence(summary)?;
    Ok(GroupTags { tags: seq.group_tags, num_groups: summary.len() })
}

/// Decode-time tag: 1 after `[bos]`, +1 after each `[sep]`, clamped to
/// `max_groups` when provided so a runaway decode cannot address a group
/// that has no encoder counterpart.
pub fn decode_tag_schedule(previous_tokens: &[TokenId], max_groups: Option<usize>) -> usize {
    debug_assert_eq!(previous_tokens.first(), Some(&BOS_ID), "prefix must begin with [bos]");
    let tag = 1 + previous_tokens.iter().filter(|&&t| t == SEP_ID).count();
    match max_groups {
        Some(k) if k >= 1 => tag.min(k),
        _ => tag,
    }
}
