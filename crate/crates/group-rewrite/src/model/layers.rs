//! Transformer building blocks (post-layer-norm, BERT-style).

use rand::RngCore;

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Everything a forward pass needs. `dropout` is the live probability:
/// zero (and `rng` None) in eval mode.
pub struct FwdCtx<'a, F: Scalar> {
    pub tape: &'a Tape<F>,
    pub store: &'a ParamStore<F>,
    pub dropout: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a, F: Scalar> FwdCtx<'a, F> {
    pub fn eval(tape: &'a Tape<F>, store: &'a ParamStore<F>) -> Self {
        FwdCtx { tape, store, dropout: 0.0, rng: None }
    }

    pub fn train(
        tape: &'a Tape<F>,
        store: &'a ParamStore<F>,
        dropout: f64,
        rng: &'a mut dyn RngCore,
    ) -> Self {
        FwdCtx { tape, store, dropout, rng: Some(rng) }
    }

    pub(crate) fn apply_dropout(&mut self, x: Var) -> Var {
        match &mut self.rng {
            Some(rng) if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, rng),
            _ => x,
        }
    }

    fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut dyn RngCore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.register(format!("{prefix}.weight"), Tensor::randn(&[d_in, d_out], INIT_STD, rng));
        let b = store.register(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
        Linear { w, b: Some(b) }
    }

    pub fn forward<F: Scalar>(&self, ctx: &FwdCtx<'_, F>, x: Var) -> Result<Var, TensorError> {
        let y = ctx.tape.matmul(x, ctx.p(self.w))?;
        match self.b {
            Some(b) => ctx.tape.add(y, ctx.p(b)),
            None => Ok(y),
        }
    }
}

pub(crate) struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.register(format!("{prefix}.gain"), Tensor::full(&[d], F::one())),
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &FwdCtx<'_, F>, x: Var) -> Result<Var, TensorError> {
        let normed = ctx.tape.layer_norm(x, LAYER_NORM_EPS);
        let scaled = ctx.tape.mul(normed, ctx.p(self.gain))?;
        ctx.tape.add(scaled, ctx.p(self.bias))
    }
}

pub(crate) struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut dyn RngCore,
        prefix: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{prefix}.q"), d_model, d_model),
            wk: Linear::new(store, rng, &format!("{prefix}.k"), d_model, d_model),
            wv: Linear::new(store, rng, &format!("{prefix}.v"), d_model, d_model),
            wo: Linear::new(store, rng, &format!("{prefix}.out"), d_model, d_model),
            heads,
            d_model,
        }
    }

    /// Returns `(attention, context)`; `attention` is `[heads, Lq, Lk]`
    /// post-softmax, pre-dropout.
    fn attend<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        queries: Var,
        keys_values: Var,
        causal: bool,
    ) -> Result<(Var, Var), TensorError> {
        let t = ctx.tape;
        let lq = t.shape(queries)[0];
        let lk = t.shape(keys_values)[0];
        let dh = self.d_model / self.heads;
        let q = self.wq.forward(ctx, queries)?;
        let k = self.wk.forward(ctx, keys_values)?;
        let v = self.wv.forward(ctx, keys_values)?;
        let q = t.permute(t.reshape(q, &[lq, self.heads, dh])?, &[1, 0, 2])?;
        let k_t = t.permute(t.reshape(k, &[lk, self.heads, dh])?, &[1, 2, 0])?;
        let v = t.permute(t.reshape(v, &[lk, self.heads, dh])?, &[1, 0, 2])?;
        let mut scores = t.matmul(q, k_t)?;
        scores = t.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
        if causal {
            let mut mask = vec![false; self.heads * lq * lk];
            for h in 0..self.heads {
                for i in 0..lq {
                    for j in (i + 1)..lk {
                        mask[(h * lq + i) * lk + j] = true;
                    }
                }
            }
            scores = t.masked_fill(scores, &mask, F::from_f64(-1e9))?;
        }
        let attn = t.softmax(scores);
        let attn_dropped = ctx.apply_dropout(attn);
        let context = t.matmul(attn_dropped, v)?;
        let merged = t.reshape(t.permute(context, &[1, 0, 2])?, &[lq, self.d_model])?;
        let out = self.wo.forward(ctx, merged)?;
        Ok((attn, out))
    }

    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        queries: Var,
        keys_values: Var,
        causal: bool,
    ) -> Result<Var, TensorError> {
        Ok(self.attend(ctx, queries, keys_values, causal)?.1)
    }

    /// Post-softmax attention weights, for probes and tests.
    pub fn attention_weights<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        queries: Var,
        keys_values: Var,
        causal: bool,
    ) -> Result<Tensor<F>, TensorError> {
        let (attn, _) = self.attend(ctx, queries, keys_values, causal)?;
        Ok(ctx.tape.value(attn))
    }
}

pub(crate) struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut dyn RngCore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{prefix}.lin1"), d_model, d_ff),
            lin2: Linear::new(store, rng, &format!("{prefix}.lin2"), d_ff, d_model),
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &FwdCtx<'_, F>, x: Var) -> Result<Var, TensorError> {
        let h = ctx.tape.gelu(self.lin1.forward(ctx, x)?);
        self.lin2.forward(ctx, h)
    }
}

pub(crate) struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut dyn RngCore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, rng, &format!("{prefix}.attn"), d_model, heads),
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d_model),
            ffn: FeedForward::new(store, rng, &format!("{prefix}.ffn"), d_model, d_ff),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d_model),
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut FwdCtx<'_, F>, x: Var) -> Result<Var, TensorError> {
        let attended = self.attn.forward(ctx, x, x, false)?;
        let attended = ctx.apply_dropout(attended);
        let x = self.ln1.forward(ctx, ctx.tape.add(x, attended)?)?;
        let ff = self.ffn.forward(ctx, x)?;
        let ff = ctx.apply_dropout(ff);
        self.ln2.forward(ctx, ctx.tape.add(x, ff)?)
    }

    #[cfg(test)]
    pub fn self_attention_weights<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        x: Var,
    ) -> Result<Tensor<F>, TensorError> {
        self.attn.attention_weights(ctx, x, x, false)
    }
}

pub(crate) struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut dyn RngCore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{prefix}.self"), d_model, heads),
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d_model),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{prefix}.cross"), d_model, heads),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d_model),
            ffn: FeedForward::new(store, rng, &format!("{prefix}.ffn"), d_model, d_ff),
            ln3: LayerNorm::new(store, &format!("{prefix}.ln3"), d_model),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        x: Var,
        memory: Var,
    ) -> Result<Var, TensorError> {
        let self_att = self.self_attn.forward(ctx, x, x, true)?;
        let self_att = ctx.apply_dropout(self_att);
        let x = self.ln1.forward(ctx, ctx.tape.add(x, self_att)?)?;
        let cross = self.cross_attn.forward(ctx, x, memory, false)?;
        let cross = ctx.apply_dropout(cross);
        let x = self.ln2.forward(ctx, ctx.tape.add(x, cross)?)?;
        let ff = self.ffn.forward(ctx, x)?;
        let ff = ctx.apply_dropout(ff);
        self.ln3.forward(ctx, ctx.tape.add(x, ff)?)
    }

    /// Cross-attention weights of this layer, `[heads, Lq, Lk]`.
    pub fn cross_attention_weights<F: Scalar>(
        &self,
        ctx: &mut FwdCtx<'_, F>,
        x: Var,
        memory: Var,
    ) -> Result<Tensor<F>, TensorError> {
        let self_att = self.self_attn.forward(ctx, x, x, true)?;
        let x = self.ln1.forward(ctx, ctx.tape.add(x, self_att)?)?;
        self.cross_attn.attention_weights(ctx, x, memory, false)
    }
}
