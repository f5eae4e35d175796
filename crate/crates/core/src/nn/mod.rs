//! Layers the recognizer is assembled from: affine maps, normalization,
//! embeddings, dropout, the conformer convolution pieces, convolutional
//! subsampling and multi-head attention (plain and relative-position).

mod attention;
mod subsample;

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};

pub use attention::{
    abs_pos_encoding, causal_mask, key_padding_mask, rel_pos_encoding, MultiHeadAttention,
    RelPosSelfAttention, MASK_FILL,
};
pub use subsample::{subsampled_len, ConvSubsampler, MIN_SUBSAMPLE_LEN};

/// Per-forward context: where to record, which parameter values to read,
/// and whether stochastic layers are active.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub params: &'t ParamStore,
    pub training: bool,
    pub dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'t> Ctx<'t> {
    pub fn eval(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Ctx {
            tape,
            params,
            training: false,
            dropout: 0.0,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(tape: &'t Tape, params: &'t ParamStore, dropout: f64, seed: u64) -> Self {
        Ctx {
            tape,
            params,
            training: true,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Dropout at the context's rate.
    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        dropout(x, self.dropout, self.training, &mut *self.rng.borrow_mut())
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)`; identity when
/// not training or `p == 0`.
pub fn dropout<'t, R: Rng>(x: Var<'t>, p: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Invalid(format!("dropout probability {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(x.shape(), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
    x.mul(x.tape().constant(mask))
}

/// `x · Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: store.declare(format!("{name}.weight"), &[out_dim, in_dim], Init::Uniform(bound)),
            bias: bias.then(|| store.declare(format!("{name}.bias"), &[out_dim], Init::Uniform(bound))),
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape("linear", &shape, &[self.out_dim, self.in_dim]));
        }
        let y = x.matmul(cx.p(self.weight).transpose()?)?;
        match self.bias {
            Some(b) => y.add(cx.p(b)),
            None => Ok(y),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.declare(format!("{name}.gamma"), &[dim], Init::Constant(1.0)),
            beta: store.declare(format!("{name}.beta"), &[dim], Init::Zeros),
            dim,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.dim) {
            return Err(Error::shape("layer_norm", &shape, &[self.dim]));
        }
        x.normalize_last(self.eps).mul(cx.p(self.gamma))?.add(cx.p(self.beta))
    }
}

/// Token embedding table, output scaled by `sqrt(dim)`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Self {
        Embedding {
            table: store.declare(
                format!("{name}.weight"),
                &[vocab, dim],
                Init::Normal(1.0 / (dim as f64).sqrt()),
            ),
            vocab,
            dim,
        }
    }

    /// Looks up `ids` (row-major, laid out as `shape`) giving `[..shape, dim]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, ids: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::Index {
                what: "token id".into(),
                index: bad,
                bound: self.vocab,
            });
        }
        let index: Vec<Option<usize>> = ids
            .iter()
            .flat_map(|&id| (0..self.dim).map(move |j| Some(id * self.dim + j)))
            .collect();
        let mut out_shape = shape.to_vec();
        out_shape.push(self.dim);
        Ok(cx
            .p(self.table)
            .gather(index.into(), 0.0, &out_shape)?
            .scale((self.dim as f64).sqrt()))
    }
}

/// Gated linear unit over the last axis: first half ⊙ sigmoid(second half).
pub fn glu<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let last = shape.len().checked_sub(1).ok_or_else(|| Error::Invalid("glu on scalar".into()))?;
    if shape[last] % 2 != 0 {
        return Err(Error::Invalid(format!("glu needs an even last dim, got {}", shape[last])));
    }
    let half = shape[last] / 2;
    x.narrow(last, 0, half)?.mul(x.narrow(last, half, half)?.sigmoid())
}

/// Per-channel temporal convolution with bias, `[B, T, C] -> [B, T, C]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        DepthwiseConv1d {
            weight: store.declare(format!("{name}.weight"), &[channels, kernel], Init::Uniform(bound)),
            bias: store.declare(format!("{name}.bias"), &[channels], Init::Uniform(bound)),
            channels,
            kernel,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.depthwise_conv1d(cx.p(self.weight))?.add(cx.p(self.bias))
    }
}
