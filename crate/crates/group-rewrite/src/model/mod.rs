//! The neural architecture: document encoder, extractor head, and the
//! contextualized rewriter decoder with its shared group-tag table.
//!
//! The encoder output for a tagged document is `enc(X) + tag_emb(G_X)`;
//! the decoder input for a prefix is `tok_emb(Y) + pos + tag_emb(G_Y)`,
//! with one tag table serving both sides so attention can address groups
//! by content. Token embeddings are tied with the output projection.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointKind};
pub use layers::FwdCtx;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::corpus::EncodedInput;
use layers::{DecoderLayer, EncoderLayer, LayerNorm, Linear};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("group tag {tag} exceeds the model's K_max {k_max}")]
    TagOutOfRange { tag: usize, k_max: usize },
    #[error("input length {len} exceeds max_positions {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("scoring needs at least one [cls] position")]
    NoClsPositions,
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error("prefix tokens and tags differ in length: {tokens} vs {tags}")]
    PrefixTagMismatch { tokens: usize, tags: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters shared by both models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub extractor_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub k_max: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8000,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            extractor_layers: 2,
            dec_layers: 2,
            d_ff: 256,
            max_positions: 512,
            k_max: 8,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.k_max < 1 {
            return Err(ModelError::BadConfig("k_max must be >= 1".into()));
        }
        if self.vocab_size < crate::corpus::SPECIALS.len() {
            return Err(ModelError::BadConfig("vocab_size smaller than the specials".into()));
        }
        if self.max_positions == 0 || self.d_ff == 0 {
            return Err(ModelError::BadConfig("max_positions and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Token + position + interval-segment embeddings feeding the encoder stack.
struct InputEmbeddings {
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    ln: LayerNorm,
}

impl InputEmbeddings {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut dyn RngCore,
        cfg: &ModelConfig,
    ) -> Self {
        InputEmbeddings {
            tok: store.register(
                "encoder.emb.tok",
                Tensor::randn(&[cfg.vocab_size, cfg.d_model], 0.02, rng),
            ),
            pos: store.register(
                "encoder.emb.pos",
                Tensor::randn(&[cfg.max_positions, cfg.d_model], 0.02, rng),
            ),
            seg: store.register("encoder.emb.seg", Tensor::randn(&[2, cfg.d_model], 0.02, rng)),
            ln: LayerNorm::new(store, "encoder.emb.ln", cfg.d_model),
        }
    }
}

/// Shared document encoder: embeddings plus a transformer stack.
pub struct DocumentEncoder {
    emb: InputEmbeddings,
    stack: Vec<EncoderLayer>,
    max_positions: usize,
}

impl DocumentEncoder {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut dyn RngCore,
        cfg: &ModelConfig,
    ) -> Self {
        let emb = InputEmbeddings::new(store, rng, cfg);
        let stack = (0..cfg.enc_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    rng,
                    &format!("encoder.layer{i}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.d_ff,
                )
            })
            .collect();
        DocumentEncoder { emb, stack, max_positions: cfg.max_positions }
    }

    /// Untagged document representation `[L, d_model]`.
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        token_ids: &[crate::corpus::TokenId],
        segment_ids: &[u8],
    ) -> Result<Var, ModelError> {
        let len = token_ids.len();
        if len == 0 {
            return Err(ModelError::EmptyPrefix);
        }
        if len > self.max_positions {
            return Err(ModelError::InputTooLong { len, max: self.max_positions });
        }
        let t = ctx.tape;
        let ids: Vec<usize> = token_ids.iter().map(|&i| i as usize).collect();
        let segs: Vec<usize> = segment_ids.iter().map(|&s| s as usize).collect();
        let tok = t.index_select0(t.param(ctx.store, self.emb.tok), &ids)?;
        let pos = t.slice0(t.param(ctx.store, self.emb.pos), 0, len)?;
        let seg = t.index_select0(t.param(ctx.store, self.emb.seg), &segs)?;
        let sum = t.add(t.add(tok, pos)?, seg)?;
        let mut x = self.emb.ln.forward(ctx, sum)?;
        x = ctx.apply_dropout(x);
        for layer in &self.stack {
            x = layer.forward(ctx, x)?;
        }
        Ok(x)
    }

    pub fn token_table(&self) -> ParamId {
        self.emb.tok
    }

    pub fn position_table(&self) -> ParamId {
        self.emb.pos
    }
}

/// The shared group-tag embedding lookup `W_G`. Semantically a
/// `(K_max + 1) x d_model` table whose row 0 is frozen to zeros; the zero
/// row is implicit in storage so it can never be trained away.
pub struct GroupTagTable {
    param: ParamId,
    k_max: usize,
    d_model: usize,
}

impl GroupTagTable {
    fn new<F: Scalar>(store: &mut ParamStore<F>, rng: &mut dyn RngCore, cfg: &ModelConfig) -> Self {
        GroupTagTable {
            param: store.register(
                "group_tags.table",
                Tensor::randn(&[cfg.k_max, cfg.d_model], 0.02, rng),
            ),
            k_max: cfg.k_max,
            d_model: cfg.d_model,
        }
    }

    pub fn param(&self) -> ParamId {
        self.param
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Embeds a tag sequence; tag 0 yields the zero vector.
    pub fn lookup<F: Scalar>(
        &self,
        ctx: &FwdCtx<'_, F>,
        tags: &[usize],
    ) -> Result<Var, ModelError> {
        if let Some(&bad) = tags.iter().find(|&&t| t > self.k_max) {
            return Err(ModelError::TagOutOfRange { tag: bad, k_max: self.k_max });
        }
        Ok(ctx.tape.tag_lookup(ctx.tape.param(ctx.store, self.param), tags)?)
    }

    /// The full `(K_max + 1) x d_model` matrix including the implicit zero
    /// row, for inspection.
    pub fn full_table<F: Scalar>(&self, store: &ParamStore<F>) -> Tensor<F> {
        let rows = store.value(self.param);
        let mut data = vec![F::zero(); self.d_model];
        data.extend_from_slice(rows.data());
        Tensor::from_vec(&[self.k_max + 1, self.d_model], data).unwrap()
    }

    /// Zeroes the trainable rows (the frozen-tag ablation).
    pub fn zero_rows<F: Scalar>(&self, store: &mut ParamStore<F>) {
        for v in store.value_mut(self.param).data_mut() {
            *v = F::zero();
        }
    }
}

/// Sentence scorer stacked on CLS vectors: a small transformer encoder plus
/// a sigmoid output layer.
pub struct ExtractorHead {
    stack: Vec<EncoderLayer>,
    out: Linear,
}

impl ExtractorHead {
    fn new<F: Scalar>(store: &mut ParamStore<F>, rng: &mut dyn RngCore, cfg: &ModelConfig) -> Self {
        let stack = (0..cfg.extractor_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    rng,
                    &format!("extractor.layer{i}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.d_ff,
                )
            })
            .collect();
        ExtractorHead { stack, out: Linear::new(store, rng, "extractor.out", cfg.d_model, 1) }
    }

    /// Per-sentence extraction probabilities, strictly inside (0, 1).
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        memory: Var,
        cls_positions: &[usize],
    ) -> Result<Var, ModelError> {
        if cls_positions.is_empty() {
            return Err(ModelError::NoClsPositions);
        }
        let t = ctx.tape;
        let mut h = t.index_select0(memory, cls_positions)?;
        for layer in &self.stack {
            h = layer.forward(ctx, h)?;
        }
        let logits = self.out.forward(ctx, h)?;
        let flat = t.reshape(logits, &[cls_positions.len()])?;
        Ok(t.sigmoid(flat))
    }
}

/// Extractive summarizer: document encoder plus scoring head.
pub struct ExtractorModel {
    pub config: ModelConfig,
    pub encoder: DocumentEncoder,
    pub head: ExtractorHead,
}

impl ExtractorModel {
    pub fn new<F: Scalar>(
        config: ModelConfig,
        store: &mut ParamStore<F>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = DocumentEncoder::new(store, &mut rng, &config);
        let head = ExtractorHead::new(store, &mut rng, &config);
        Ok(ExtractorModel { config, encoder, head })
    }

    /// Per-sentence extraction probabilities for an encoded document.
    /// Group tags are ignored here; extraction sees the untagged document.
    pub fn score_sentences<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        input: &EncodedInput,
    ) -> Result<Var, ModelError> {
        let memory = self.encoder.forward(ctx, &input.token_ids, &input.segment_ids)?;
        self.head.forward(ctx, memory, &input.cls_positions)
    }
}

/// Contextualized rewriter: tagged encoder plus transformer decoder with
/// tied input-output token embeddings.
pub struct RewriterModel {
    pub config: ModelConfig,
    pub encoder: DocumentEncoder,
    pub tag_table: GroupTagTable,
    dec_emb_ln: LayerNorm,
    dec_stack: Vec<DecoderLayer>,
}

impl RewriterModel {
    pub fn new<F: Scalar>(
        config: ModelConfig,
        store: &mut ParamStore<F>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = DocumentEncoder::new(store, &mut rng, &config);
        let tag_table = GroupTagTable::new(store, &mut rng, &config);
        let dec_emb_ln = LayerNorm::new(store, "decoder.emb.ln", config.d_model);
        let dec_stack = (0..config.dec_layers)
            .map(|i| {
                DecoderLayer::new(
                    store,
                    &mut rng,
                    &format!("decoder.layer{i}"),
                    config.d_model,
                    config.heads,
                    config.d_ff,
                )
            })
            .collect();
        Ok(RewriterModel { config, encoder, tag_table, dec_emb_ln, dec_stack })
    }

    /// Tagged document memory: `enc(X) + tag_emb(G_X)`, shape `[L, d]`.
    pub fn encode<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        input: &EncodedInput,
    ) -> Result<Var, ModelError> {
        let enc = self.encoder.forward(ctx, &input.token_ids, &input.segment_ids)?;
        let tags = self.tag_table.lookup(ctx, &input.group_tags)?;
        Ok(ctx.tape.add(enc, tags)?)
    }

    /// Log-probabilities for every prefix position, shape `[T, vocab]`.
    /// Position t conditions on tokens (and tags) strictly before t.
    pub fn decode_all<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        prefix_tokens: &[crate::corpus::TokenId],
        prefix_tags: &[usize],
        memory: Var,
    ) -> Result<Var, ModelError> {
        if prefix_tokens.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        if prefix_tokens.len() != prefix_tags.len() {
            return Err(ModelError::PrefixTagMismatch {
                tokens: prefix_tokens.len(),
                tags: prefix_tags.len(),
            });
        }
        let len = prefix_tokens.len();
        if len > self.config.max_positions {
            return Err(ModelError::InputTooLong { len, max: self.config.max_positions });
        }
        let t = ctx.tape;
        let ids: Vec<usize> = prefix_tokens.iter().map(|&i| i as usize).collect();
        let tok_table = t.param(ctx.store, self.encoder.token_table());
        let tok = t.index_select0(tok_table, &ids)?;
        let pos = t.slice0(t.param(ctx.store, self.encoder.position_table()), 0, len)?;
        let tag = self.tag_table.lookup(ctx, prefix_tags)?;
        let sum = t.add(t.add(tok, pos)?, tag)?;
        let mut x = self.dec_emb_ln.forward(ctx, sum)?;
        x = ctx.apply_dropout(x);
        for layer in &self.dec_stack {
            x = layer.forward(ctx, x, memory)?;
        }
        // tied output projection: logits = x . tok_emb^T
        let proj = t.permute(tok_table, &[1, 0])?;
        let logits = t.matmul(x, proj)?;
        Ok(t.log_softmax(logits))
    }

    /// Next-token log-probabilities after the given prefix, shape `[vocab]`.
    pub fn decoder_forward<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        prefix_tokens: &[crate::corpus::TokenId],
        prefix_tags: &[usize],
        memory: Var,
    ) -> Result<Var, ModelError> {
        let all = self.decode_all(ctx, prefix_tokens, prefix_tags, memory)?;
        let len = prefix_tokens.len();
        let last = ctx.tape.slice0(all, len - 1, len)?;
        Ok(ctx.tape.reshape(last, &[self.config.vocab_size])?)
    }

    /// Cross-attention weights of the final decoder layer, for probes.
    pub fn cross_attention_probe<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        prefix_tokens: &[crate::corpus::TokenId],
        prefix_tags: &[usize],
        memory: Var,
    ) -> Result<Tensor<F>, ModelError> {
        let t = ctx.tape;
        let len = prefix_tokens.len();
        let ids: Vec<usize> = prefix_tokens.iter().map(|&i| i as usize).collect();
        let tok_table = t.param(ctx.store, self.encoder.token_table());
        let tok = t.index_select0(tok_table, &ids)?;
        let pos = t.slice0(t.param(ctx.store, self.encoder.position_table()), 0, len)?;
        let tag = self.tag_table.lookup(ctx, prefix_tags)?;
        let sum = t.add(t.add(tok, pos)?, tag)?;
        let mut x = self.dec_emb_ln.forward(ctx, sum)?;
        for (i, layer) in self.dec_stack.iter().enumerate() {
            if i + 1 == self.dec_stack.len() {
                return Ok(layer.cross_attention_weights(ctx, x, memory)?);
            }
            x = layer.forward(ctx, x, memory)?;
        }
        unreachable!("decoder stack is never empty")
    }

    /// Parameter ids split into (encoder group, decoder group). The decoder
    /// group holds the freshly initialized parts: the decoder stack and the
    /// group-tag table.
    pub fn param_groups<F: Scalar>(&self, store: &ParamStore<F>) -> (Vec<ParamId>, Vec<ParamId>) {
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            if name.starts_with("decoder.") || name.starts_with("group_tags.") {
                dec.push(id);
            } else {
                enc.push(id);
            }
        }
        (enc, dec)
    }
}

pub use layers::LAYER_NORM_EPS;
