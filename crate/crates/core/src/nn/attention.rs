use std::sync::Arc;

use super::{Ctx, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Init, Mask, ParamId, ParamStore, Tensor, Var};

/// Logit assigned to masked attention positions; finite so arithmetic on
/// masked rows never produces NaN.
pub const MASK_FILL: f64 = -1e30;

fn sinusoid_row(pos: f64, d: usize, row: &mut [f64]) {
    for k in 0..d.div_ceil(2) {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / d as f64);
        row[2 * k] = (pos * freq).sin();
        if 2 * k + 1 < d {
            row[2 * k + 1] = (pos * freq).cos();
        }
    }
}

/// Sinusoidal encodings of relative offsets `len-1, len-2, ..., -(len-1)`
/// (row `m` encodes offset `len - 1 - m`), sin/cos interleaved.
pub fn rel_pos_encoding(len: usize, d: usize) -> Tensor {
    assert!(len >= 1 && d >= 1);
    let rows = 2 * len - 1;
    let mut data = vec![0.0; rows * d];
    for m in 0..rows {
        let offset = len as f64 - 1.0 - m as f64;
        sinusoid_row(offset, d, &mut data[m * d..(m + 1) * d]);
    }
    Tensor::from_parts(vec![rows, d], data)
}

/// Absolute sinusoidal encodings for positions `0..len`.
pub fn abs_pos_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        sinusoid_row(p as f64, d, &mut data[p * d..(p + 1) * d]);
    }
    Tensor::from_parts(vec![len, d], data)
}

/// `[B, 1, T]` mask hiding key positions at or beyond each length.
pub fn key_padding_mask(lengths: &[usize], t: usize) -> Mask {
    Mask::from_fn([lengths.len(), 1, t], |i| i[2] >= lengths[i[0]])
}

/// `[B, L, L]` mask combining causality with key padding.
pub fn causal_mask(lengths: &[usize], l: usize) -> Mask {
    Mask::from_fn([lengths.len(), l, l], |i| i[2] > i[1] || i[2] >= lengths[i[0]])
}

fn split_heads<'t>(x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, t, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

fn merge_heads<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, h, t, dk) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, t, h * dk])
}

/// Masked softmax over keys; `mask` is `[B, Tq|1, Tk]`, broadcast over heads.
fn attend<'t>(scores: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
    let s = scores.shape();
    let m = mask.shape();
    if m.len() != 3 || m[0] != s[0] || (m[1] != s[2] && m[1] != 1) || m[2] != s[3] {
        return Err(Error::shape("attention mask", m, &s));
    }
    let mask = mask.reshape([m[0], 1, m[1], m[2]])?;
    scores.masked_fill(&mask, MASK_FILL)?.softmax(3)
}

fn check_heads(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Invalid(format!(
            "d_model {d_model} not divisible by {heads} heads"
        )));
    }
    Ok(d_model / heads)
}

/// Self-attention with relative sinusoidal positions:
/// `score(i, j) = [(q_i + u)·k_j + (q_i + v)·r_{i-j}] / sqrt(d_k)`.
#[derive(Clone, Debug)]
pub struct RelPosSelfAttention {
    pub heads: usize,
    pub d_k: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub pos: Linear,
    pub pos_bias_u: ParamId,
    pub pos_bias_v: ParamId,
}

impl RelPosSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        let d_k = check_heads(d_model, heads)?;
        let xavier = (6.0 / (heads + d_k) as f64).sqrt();
        Ok(RelPosSelfAttention {
            heads,
            d_k,
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, true),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, true),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, true),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, true),
            pos: Linear::new(store, &format!("{name}.pos"), d_model, d_model, false),
            pos_bias_u: store.declare(format!("{name}.pos_bias_u"), &[heads, d_k], Init::Uniform(xavier)),
            pos_bias_v: store.declare(format!("{name}.pos_bias_v"), &[heads, d_k], Init::Uniform(xavier)),
        })
    }

    /// Unmasked scaled scores `[B, h, T, T]` and the value heads.
    pub fn scores<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.heads * self.d_k {
            return Err(Error::shape("rel_self_attention", &shape, &[self.heads * self.d_k]));
        }
        let (b, t) = (shape[0], shape[1]);
        let (h, dk) = (self.heads, self.d_k);
        let q = split_heads(self.query.forward(cx, x)?, h)?;
        let k = split_heads(self.key.forward(cx, x)?, h)?;
        let v = split_heads(self.value.forward(cx, x)?, h)?;

        let pe = cx.constant(rel_pos_encoding(t, h * dk));
        let p = self
            .pos
            .forward(cx, pe)?
            .reshape(&[2 * t - 1, h, dk])?
            .permute(&[1, 2, 0])?; // [h, dk, 2T-1]

        let u = cx.p(self.pos_bias_u).reshape(&[h, 1, dk])?;
        let vb = cx.p(self.pos_bias_v).reshape(&[h, 1, dk])?;
        let content = q.add(u)?.matmul(k.transpose()?)?;
        let position_all = q.add(vb)?.matmul(p)?; // [B, h, T, 2T-1]

        // score(i, j) reads offset i - j, stored at column (T-1) - i + j
        let w = 2 * t - 1;
        let index: Vec<Option<usize>> = (0..b * h)
            .flat_map(|bh| {
                (0..t).flat_map(move |i| (0..t).map(move |j| Some((bh * t + i) * w + (t - 1 - i + j))))
            })
            .collect();
        let position = position_all.gather(Arc::new(index), 0.0, &[b, h, t, t])?;
        let scores = content.add(position)?.scale(1.0 / (dk as f64).sqrt());
        Ok((scores, v))
    }

    /// Returns the block output and the attention weights `[B, h, T, T]`.
    pub fn forward_with_weights<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        mask: &Mask,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (scores, v) = self.scores(cx, x)?;
        let weights = attend(scores, mask)?;
        let ctx = merge_heads(weights.matmul(v)?)?;
        Ok((self.out.forward(cx, ctx)?, weights))
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, mask: &Mask) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(cx, x, mask)?.0)
    }
}

/// Standard scaled dot-product multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_k: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        let d_k = check_heads(d_model, heads)?;
        Ok(MultiHeadAttention {
            heads,
            d_k,
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, true),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, true),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, true),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, true),
        })
    }

    /// Queries from `x: [B, L, d]`, keys/values from `memory: [B, T, d]`;
    /// `mask` is `[B, L|1, T]`.
    pub fn forward_with_weights<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        memory: Var<'t>,
        mask: &Mask,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (xs, ms) = (x.shape(), memory.shape());
        let d = self.heads * self.d_k;
        if xs.len() != 3 || ms.len() != 3 || xs[2] != d || ms[2] != d || xs[0] != ms[0] {
            return Err(Error::shape("cross_attention", &xs, &ms));
        }
        let q = split_heads(self.query.forward(cx, x)?, self.heads)?;
        let k = split_heads(self.key.forward(cx, memory)?, self.heads)?;
        let v = split_heads(self.value.forward(cx, memory)?, self.heads)?;
        let scores = q.matmul(k.transpose()?)?.scale(1.0 / (self.d_k as f64).sqrt());
        let weights = attend(scores, mask)?;
        let ctx = merge_heads(weights.matmul(v)?)?;
        Ok((self.out.forward(cx, ctx)?, weights))
    }

    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        memory: Var<'t>,
        mask: &Mask,
    ) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(cx, x, memory, mask)?.0)
    }
}
