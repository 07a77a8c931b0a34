//! Post-norm bidirectional transformer encoder.
//!
//! Per layer, for every sequence independently:
//!
//! ```text
//! h_i     = LayerNorm(x_i + Σ_m W_m Σ_j A^m_ij V_m x_j),   A^m_i = softmax_j((Q_m x_i)·(K_m x_j) / √(d/M))
//! x'_i    = LayerNorm(h_i + W_2 GELU(W_1 h_i + b_1) + b_2)
//! ```
//!
//! Many sequences are processed together as one stacked `(rows, d)` matrix;
//! attention never crosses the row spans of different sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SpanAttention, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub d_ff: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d={} must be divisible by M={}",
                self.d, self.heads
            )));
        }
        if self.d_ff < self.d {
            return Err(Error::Config(format!(
                "d_ff={} must be at least d={}",
                self.d_ff, self.d
            )));
        }
        Ok(())
    }
}

/// Per-head projections are stored side by side: head `m` owns columns
/// `m·d/M..(m+1)·d/M` of `query`, `key`, `value`, and the same rows of
/// `output`.
#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub attn_gamma: ParamId,
    pub attn_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ffn_gamma: ParamId,
    pub ffn_beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<LayerParams>,
}

/// Result of [`Encoder::encode`].
pub struct EncoderOutput {
    pub output: Var,
    /// Attention node per layer; see [`Tape::attention_weights`].
    pub attention: Vec<Var>,
}

impl Encoder {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.d, cfg.d_ff);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |n: &str| format!("encoder.layer{l}.{n}");
            let mut w = |store: &mut ParamStore<T>, name: String, shape: &[usize]| {
                store.add(name, truncated_normal(rng, shape, 0.02), true)
            };
            let query = w(store, p("heads.query"), &[d, d])?;
            let key = w(store, p("heads.key"), &[d, d])?;
            let value = w(store, p("heads.value"), &[d, d])?;
            let output = w(store, p("heads.output"), &[d, d])?;
            let w1 = w(store, p("ffn.w1"), &[d, f])?;
            let w2 = w(store, p("ffn.w2"), &[f, d])?;
            layers.push(LayerParams {
                query,
                key,
                value,
                output,
                w1,
                w2,
                attn_gamma: store.add(p("attn_norm.gamma"), Tensor::ones(&[d]), false)?,
                attn_beta: store.add(p("attn_norm.beta"), Tensor::zeros(&[d]), false)?,
                b1: store.add(p("ffn.b1"), Tensor::zeros(&[f]), false)?,
                b2: store.add(p("ffn.b2"), Tensor::zeros(&[d]), false)?,
                ffn_gamma: store.add(p("ffn_norm.gamma"), Tensor::ones(&[d]), false)?,
                ffn_beta: store.add(p("ffn_norm.beta"), Tensor::zeros(&[d]), false)?,
            });
        }
        Ok(Self { cfg, layers })
    }

    /// Attention sublayer with residual and layer norm. Returns the output
    /// and the attention node.
    pub fn multi_head_self_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layer: &LayerParams,
        x: Var,
        spans: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        let wq = tape.param(store, layer.query);
        let wk = tape.param(store, layer.key);
        let wv = tape.param(store, layer.value);
        let wo = tape.param(store, layer.output);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let ctx = tape.span_attention(q, k, v, spans, self.cfg.heads)?;
        let mixed = tape.matmul(ctx, wo)?;
        let res = tape.add(x, mixed)?;
        let g = tape.param(store, layer.attn_gamma);
        let b = tape.param(store, layer.attn_beta);
        Ok((tape.layer_norm(res, g, b)?, ctx))
    }

    pub fn position_wise_ffn<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layer: &LayerParams,
        h: Var,
    ) -> Result<Var> {
        let w1 = tape.param(store, layer.w1);
        let b1 = tape.param(store, layer.b1);
        let w2 = tape.param(store, layer.w2);
        let b2 = tape.param(store, layer.b2);
        let a = tape.matmul(h, w1)?;
        let a = tape.add(a, b1)?;
        let a = tape.gelu(a);
        let y = tape.matmul(a, w2)?;
        let y = tape.add(y, b2)?;
        let res = tape.add(h, y)?;
        let g = tape.param(store, layer.ffn_gamma);
        let b = tape.param(store, layer.ffn_beta);
        tape.layer_norm(res, g, b)
    }

    /// Runs every layer over the stacked sequences. `spans` lists
    /// `(first_row, length)` per sequence; `None` treats all rows as one.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        spans: Option<&[(usize, usize)]>,
    ) -> Result<EncoderOutput> {
        let rows = tape.shape(x)[0];
        let whole = [(0, rows)];
        let spans = spans.unwrap_or(&whole);
        let mut h = x;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, node) = self.multi_head_self_attention(tape, store, layer, h, spans)?;
            attention.push(node);
            h = self.position_wise_ffn(tape, store, layer, a)?;
        }
        Ok(EncoderOutput { output: h, attention })
    }
}

/// Attention weights saved by one attention node.
pub fn attention_record<T: Real>(tape: &Tape<T>, node: Var) -> Result<&SpanAttention<T>> {
    tape.attention_weights(node)
        .ok_or_else(|| Error::invalid("attention_record", "node is not an attention op"))
}

/// Rows of the encoder output at each sequence's `[MASK]` element.
pub fn extract_answer_state<T: Real>(tape: &mut Tape<T>, output: Var, mask_rows: &[usize]) -> Result<Var> {
    tape.gather_rows(output, mask_rows)
}

/// Index of the single `[MASK]` token, or an error for zero or several.
pub fn find_mask(tokens: &[usize]) -> Result<usize> {
    let mut found = tokens.iter().enumerate().filter(|(_, &t)| t == crate::sequence::MASK);
    match (found.next(), found.next()) {
        (Some((i, _)), None) => Ok(i),
        (None, _) => Err(Error::invalid("extract_answer_state", "sequence has no [MASK] element")),
        _ => Err(Error::invalid(
            "extract_answer_state",
            "sequence has more than one [MASK] element",
        )),
    }
}
