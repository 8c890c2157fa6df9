//! Dataset ingestion: tokenization, vocabulary, and assembly of encoder and
//! decoder token sequences with special tokens and interval segments.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const BOS_ID: TokenId = 4;
pub const EOS_ID: TokenId = 5;

/// Reserved surfaces, in id order.
pub const SPECIALS: [&str; 6] = ["[pad]", "[unk]", "[cls]", "[sep]", "[bos]", "[eos]"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < SPECIALS.len()
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot build a vocabulary from an empty stream")]
    EmptyStream,
    #[error("vocab max_size {max_size} must exceed the {specials} reserved specials")]
    VocabTooSmall { max_size: usize, specials: usize },
    #[error("vocab file is malformed: {0}")]
    BadVocabFile(String),
    #[error("document has no sentences")]
    EmptyDocument,
    #[error("summary has no sentences")]
    EmptySummary,
    #[error("sentence {index} of `{which}` is empty after tokenization")]
    EmptySentence { which: String, index: usize },
    #[error("need one tag per sentence: {tags} tags for {sentences} sentences")]
    TagCountMismatch { tags: usize, sentences: usize },
    #[error("first sentence needs {needed} positions, more than max_positions {max}")]
    SentenceTooLong { needed: usize, max: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Surface-to-id mapping with dense ids and reserved low ids for specials.
#[derive(Debug, Clone)]
pub struct Vocab {
    surfaces: Vec<String>,
    by_surface: HashMap<String, TokenId>,
}

impl Vocab {
    fn from_surfaces(surfaces: Vec<String>) -> Self {
        let by_surface = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        Vocab { surfaces, by_surface }
    }

    /// Total lookup: unknown surfaces map to `[unk]`.
    pub fn lookup(&self, surface: &str) -> TokenId {
        self.by_surface.get(surface).copied().unwrap_or(UNK_ID)
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.surfaces[id as usize]
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    /// One surface per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = BufWriter::new(File::create(path)?);
        for s in &self.surfaces {
            writeln!(out, "{s}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = BufReader::new(File::open(path)?);
        let surfaces: Vec<String> = file.lines().collect::<Result<_, _>>()?;
        if surfaces.len() < SPECIALS.len() {
            return Err(CorpusError::BadVocabFile(format!(
                "only {} lines, expected at least the {} specials",
                surfaces.len(),
                SPECIALS.len()
            )));
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if surfaces[i] != *want {
                return Err(CorpusError::BadVocabFile(format!(
                    "line {i} must be `{want}`, found `{}`",
                    surfaces[i]
                )));
            }
        }
        Ok(Vocab::from_surfaces(surfaces))
    }
}

/// Builds a vocabulary from raw samples: specials first, then words by
/// descending frequency (ties broken lexicographically) up to `max_size`,
/// keeping only words seen at least `min_freq` times.
pub fn build_vocab<'a>(
    samples: impl IntoIterator<Item = &'a RawSample>,
    max_size: usize,
    min_freq: usize,
) -> Result<Vocab, CorpusError> {
    if max_size <= SPECIALS.len() {
        return Err(CorpusError::VocabTooSmall { max_size, specials: SPECIALS.len() });
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut saw_any = false;
    for sample in samples {
        saw_any = true;
        for text in sample.document.iter().chain(sample.summary.iter()) {
            for word in split_words(text) {
                *counts.entry(word).or_default() += 1;
            }
        }
    }
    if !saw_any {
        return Err(CorpusError::EmptyStream);
    }
    let mut words: Vec<(String, usize)> =
        counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut surfaces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    surfaces.extend(
        words
            .into_iter()
            .take(max_size - SPECIALS.len())
            .map(|(w, _)| w),
    );
    Ok(Vocab::from_surfaces(surfaces))
}

/// Lowercased word splitting: alphanumeric runs stay together, every other
/// non-whitespace character becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut buf = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            buf.extend(ch.to_lowercase());
        } else {
            if !buf.is_empty() {
                words.push(std::mem::take(&mut buf));
            }
            if !ch.is_whitespace() {
                words.push(ch.to_lowercase().collect());
            }
        }
    }
    if !buf.is_empty() {
        words.push(buf);
    }
    words
}

/// One tokenized sentence. May be empty straight out of [`tokenize`]; sample
/// construction rejects empty sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub ids: Vec<TokenId>,
    pub surface: String,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn words(&self) -> Vec<String> {
        split_words(&self.surface)
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Sentence {
    let ids = split_words(text).iter().map(|w| vocab.lookup(w)).collect();
    Sentence { ids, surface: text.to_string() }
}

/// One JSONL dataset record, before tokenization. `extraction` holds oracle
/// or planted document-sentence indices when present.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RawSample {
    pub id: String,
    pub document: Vec<String>,
    pub summary: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extraction: Option<Vec<usize>>,
}

/// A tokenized document/summary pair.
#[derive(Debug, Clone)]
pub struct SummarySample {
    pub id: String,
    pub document: Vec<Sentence>,
    pub summary: Vec<Sentence>,
}

impl SummarySample {
    pub fn from_raw(raw: &RawSample, vocab: &Vocab) -> Result<Self, CorpusError> {
        if raw.document.is_empty() {
            return Err(CorpusError::EmptyDocument);
        }
        if raw.summary.is_empty() {
            return Err(CorpusError::EmptySummary);
        }
        let tokenize_all = |texts: &[String], which: &str| {
            texts
                .iter()
                .enumerate()
                .map(|(index, text)| {
                    let s = tokenize(text, vocab);
                    if s.is_empty() {
                        Err(CorpusError::EmptySentence { which: which.to_string(), index })
                    } else {
                        Ok(s)
                    }
                })
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(SummarySample {
            id: raw.id.clone(),
            document: tokenize_all(&raw.document, "document")?,
            summary: tokenize_all(&raw.summary, "summary")?,
        })
    }
}

/// Encoder-ready token sequence: `[cls] tokens.. [sep]` per sentence, with
/// alternating interval segments and per-token group tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<u8>,
    pub cls_positions: Vec<usize>,
    pub group_tags: Vec<usize>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of sentences that survived truncation.
    pub fn num_sentences(&self) -> usize {
        self.cls_positions.len()
    }
}

/// Lays out `[cls] s_i [sep]` blocks. Truncation to `max_positions` drops a
/// partially cut trailing sentence entirely, so every retained sentence is
/// complete.
pub fn assemble_encoder_input(
    doc: &[Sentence],
    tags: &[usize],
    max_positions: usize,
) -> Result<EncodedInput, CorpusError> {
    if doc.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    if tags.len() != doc.len() {
        return Err(CorpusError::TagCountMismatch { tags: tags.len(), sentences: doc.len() });
    }
    if doc[0].len() + 2 > max_positions {
        return Err(CorpusError::SentenceTooLong { needed: doc[0].len() + 2, max: max_positions });
    }
    let mut out = EncodedInput {
        token_ids: Vec::new(),
        segment_ids: Vec::new(),
        cls_positions: Vec::new(),
        group_tags: Vec::new(),
    };
    for (i, sentence) in doc.iter().enumerate() {
        let needed = sentence.len() + 2;
        if out.token_ids.len() + needed > max_positions {
            break;
        }
        let segment = (i % 2) as u8;
        let tag = tags[i];
        out.cls_positions.push(out.token_ids.len());
        out.token_ids.push(CLS_ID);
        out.token_ids.extend_from_slice(&sentence.ids);
        out.token_ids.push(SEP_ID);
        for _ in 0..needed {
            out.segment_ids.push(segment);
            out.group_tags.push(tag);
        }
    }
    Ok(out)
}

/// Decoder-side target sequence: `[bos] s_1 [sep] s_2 [sep] .. s_K [eos]`,
/// with group tags increasing per sentence. The `[sep]` closing sentence k
/// carries tag k; `[bos]` carries 1 and `[eos]` carries K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderSequence {
    pub token_ids: Vec<TokenId>,
    pub group_tags: Vec<usize>,
}

impl DecoderSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Splits back into per-sentence token lists (round-trip of assembly).
    pub fn sentence_token_ids(&self) -> Vec<Vec<TokenId>> {
        let inner: Vec<TokenId> = self
            .token_ids
            .iter()
            .copied()
            .filter(|&t| t != BOS_ID && t != EOS_ID)
            .collect();
        inner
            .split(|&t| t == SEP_ID)
            .map(|s| s.to_vec())
            .collect()
    }
}

pub fn assemble_decoder_sequence(summary: &[Sentence]) -> Result<DecoderSequence, CorpusError> {
    if summary.is_empty() {
        return Err(CorpusError::EmptySummary);
    }
    let k_total = summary.len();
    let mut token_ids = vec![BOS_ID];
    let mut group_tags = vec![1usize];
    for (i, sentence) in summary.iter().enumerate() {
        let k = i + 1;
        token_ids.extend_from_slice(&sentence.ids);
        group_tags.extend(std::iter::repeat(k).take(sentence.len()));
        if k < k_total {
            token_ids.push(SEP_ID);
            group_tags.push(k);
        }
    }
    token_ids.push(EOS_ID);
    group_tags.push(k_total);
    Ok(DecoderSequence { token_ids, group_tags })
}

/// Lazy JSONL reader yielding raw samples with 1-based line numbers on
/// errors. Blank lines are skipped.
pub struct JsonlReader {
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl JsonlReader {
    pub fn open(path: &Path) -> Result<Self, CorpusError> {
        Ok(JsonlReader { lines: BufReader::new(File::open(path)?).lines(), line_no: 0 })
    }
}

impl Iterator for JsonlReader {
    type Item = Result<RawSample, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            match self.lines.next()? {
                Err(e) => return Some(Err(e.into())),
                Ok(line) if line.trim().is_empty() => continue,
                Ok(line) => {
                    return Some(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                        line: self.line_no,
                        msg: e.to_string(),
                    }))
                }
            }
        }
    }
}

pub fn load_jsonl(path: &Path) -> Result<JsonlReader, CorpusError> {
    JsonlReader::open(path)
}

/// Reads a whole JSONL file eagerly.
pub fn load_jsonl_all(path: &Path) -> Result<Vec<RawSample>, CorpusError> {
    load_jsonl(path)?.collect()
}

pub fn write_jsonl<'a>(
    path: &Path,
    samples: impl IntoIterator<Item = &'a RawSample>,
) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)
            .map_err(|e| CorpusError::Parse { line: 0, msg: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
