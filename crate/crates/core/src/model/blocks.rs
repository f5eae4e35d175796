use super::config::DecoderPosMode;
use crate::error::{Error, Result};
use crate::nn::{glu, Ctx, DepthwiseConv1d, LayerNorm, Linear, MultiHeadAttention, RelPosSelfAttention};
use crate::tensor::{Mask, ParamStore, Tensor, Var};

/// `Linear → swish → dropout → Linear → dropout`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub linear1: Linear,
    pub linear2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ffn: usize) -> Self {
        FeedForward {
            linear1: Linear::new(store, &format!("{name}.linear1"), d_model, d_ffn, true),
            linear2: Linear::new(store, &format!("{name}.linear2"), d_ffn, d_model, true),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = cx.dropout(self.linear1.forward(cx, x)?.swish())?;
        cx.dropout(self.linear2.forward(cx, h)?)
    }
}

/// `[B, T, 1]` indicator of valid frames.
pub fn frame_mask(lengths: &[usize], t: usize) -> Tensor {
    Tensor::from_fn([lengths.len(), t, 1], |i| {
        if i % t < lengths[i / t] {
            1.0
        } else {
            0.0
        }
    })
}

/// Pointwise d→2d, GLU, depthwise conv, layer norm, swish, pointwise d→d,
/// dropout. Padded frames are zeroed before the depthwise convolution so
/// they never leak into valid neighbours.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub pointwise1: Linear,
    pub depthwise: DepthwiseConv1d,
    pub norm: LayerNorm,
    pub pointwise2: Linear,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, kernel: usize) -> Self {
        ConvModule {
            pointwise1: Linear::new(store, &format!("{name}.pointwise1"), d_model, 2 * d_model, true),
            depthwise: DepthwiseConv1d::new(store, &format!("{name}.depthwise"), d_model, kernel),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model),
            pointwise2: Linear::new(store, &format!("{name}.pointwise2"), d_model, d_model, true),
        }
    }

    /// `valid` is a `[B, T, 1]` frame indicator (see [`frame_mask`]).
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, valid: Var<'t>) -> Result<Var<'t>> {
        let h = glu(self.pointwise1.forward(cx, x)?)?.mul(valid)?;
        let h = self.depthwise.forward(cx, h)?;
        let h = self.norm.forward(cx, h)?.swish();
        cx.dropout(self.pointwise2.forward(cx, h)?)
    }
}

/// Post-norm conformer block:
///
/// ```text
/// x1 = LN(x  + ½ FFN(x))
/// x2 = LN(x1 + MHSA(x1))
/// x3 = LN(x2 + Conv(x2))
/// y  = LN(x3 + ½ FFN(x3))
/// ```
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ffn1: FeedForward,
    pub self_attn: RelPosSelfAttention,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub norm_ffn1: LayerNorm,
    pub norm_attn: LayerNorm,
    pub norm_conv: LayerNorm,
    pub norm_ffn2: LayerNorm,
    pub d_model: usize,
}

impl ConformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ffn: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(ConformerBlock {
            ffn1: FeedForward::new(store, &format!("{name}.ffn1"), d_model, d_ffn),
            self_attn: RelPosSelfAttention::new(store, &format!("{name}.self_attn"), d_model, heads)?,
            conv: ConvModule::new(store, &format!("{name}.conv"), d_model, kernel),
            ffn2: FeedForward::new(store, &format!("{name}.ffn2"), d_model, d_ffn),
            norm_ffn1: LayerNorm::new(store, &format!("{name}.norm_ffn1"), d_model),
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d_model),
            norm_conv: LayerNorm::new(store, &format!("{name}.norm_conv"), d_model),
            norm_ffn2: LayerNorm::new(store, &format!("{name}.norm_ffn2"), d_model),
            d_model,
        })
    }

    /// `x: [B, T, d]`; `lengths` are the valid frame counts per utterance.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, lengths: &[usize]) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.d_model || shape[0] != lengths.len() {
            return Err(Error::shape("conformer_block", &shape, &[lengths.len(), 0, self.d_model]));
        }
        let t = shape[1];
        let mask = crate::nn::key_padding_mask(lengths, t);
        let valid = cx.constant(frame_mask(lengths, t));

        let x1 = self.norm_ffn1.forward(cx, x.add(self.ffn1.forward(cx, x)?.scale(0.5))?)?;
        let att = cx.dropout(self.self_attn.forward(cx, x1, &mask)?)?;
        let x2 = self.norm_attn.forward(cx, x1.add(att)?)?;
        let x3 = self.norm_conv.forward(cx, x2.add(self.conv.forward(cx, x2, valid)?)?)?;
        self.norm_ffn2.forward(cx, x3.add(self.ffn2.forward(cx, x3)?.scale(0.5))?)
    }
}

#[derive(Clone, Debug)]
pub enum DecoderSelfAttention {
    Relative(RelPosSelfAttention),
    Absolute(MultiHeadAttention),
}

/// Post-norm transformer decoder block:
///
/// ```text
/// x1 = LN(x  + MHSA(x))
/// x2 = LN(x1 + MHCA(x1, memory))
/// y  = LN(x2 + FFN(x2))
/// ```
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: DecoderSelfAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm_self: LayerNorm,
    pub norm_cross: LayerNorm,
    pub norm_ffn: LayerNorm,
    pub d_model: usize,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ffn: usize,
        pos_mode: DecoderPosMode,
    ) -> Result<Self> {
        let self_name = format!("{name}.self_attn");
        let self_attn = match pos_mode {
            DecoderPosMode::Relative => {
                DecoderSelfAttention::Relative(RelPosSelfAttention::new(store, &self_name, d_model, heads)?)
            }
            DecoderPosMode::Absolute => {
                DecoderSelfAttention::Absolute(MultiHeadAttention::new(store, &self_name, d_model, heads)?)
            }
        };
        Ok(DecoderBlock {
            self_attn,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d_model, heads)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, d_ffn),
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d_model),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d_model),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d_model),
            d_model,
        })
    }

    /// `x: [B, L, d]` with `self_mask: [B, L, L]`; `memory: [B, T, d]` with
    /// `memory_mask: [B, 1, T]`.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        self_mask: &Mask,
        memory: Var<'t>,
        memory_mask: &Mask,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::shape("decoder_block", &shape, &[self.d_model]));
        }
        let sa = match &self.self_attn {
            DecoderSelfAttention::Relative(a) => a.forward(cx, x, self_mask)?,
            DecoderSelfAttention::Absolute(a) => a.forward(cx, x, x, self_mask)?,
        };
        let x1 = self.norm_self.forward(cx, x.add(cx.dropout(sa)?)?)?;
        let ca = cx.dropout(self.cross_attn.forward(cx, x1, memory, memory_mask)?)?;
        let x2 = self.norm_cross.forward(cx, x1.add(ca)?)?;
        self.norm_ffn.forward(cx, x2.add(self.ffn.forward(cx, x2)?)?)
    }
}
