use super::{Ctx, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Init, ParamId, ParamStore, Var};

/// Shortest input that survives two stride-2, kernel-3 convolutions.
pub const MIN_SUBSAMPLE_LEN: usize = 7;

/// Output length after two valid 3-tap stride-2 convolutions.
pub fn subsampled_len(len: usize) -> Option<usize> {
    (len >= MIN_SUBSAMPLE_LEN).then(|| ((len - 1) / 2 - 1) / 2)
}

/// Two 3×3 stride-2 convolutions (each followed by relu) over the
/// time × frequency plane, then a projection of channels × remaining
/// frequency bins to `d_model`. Roughly a 4× reduction in frame rate.
#[derive(Clone, Debug)]
pub struct ConvSubsampler {
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
    pub out: Linear,
    pub feat_dim: usize,
    pub channels: usize,
}

impl ConvSubsampler {
    pub fn new(store: &mut ParamStore, name: &str, feat_dim: usize, d_model: usize) -> Result<Self> {
        let folded = subsampled_len(feat_dim).ok_or_else(|| {
            Error::Invalid(format!(
                "feature dim {feat_dim} too small for subsampling (need >= {MIN_SUBSAMPLE_LEN})"
            ))
        })?;
        let c = d_model;
        let b1 = 1.0 / 3.0;
        let b2 = 1.0 / (9.0 * c as f64).sqrt();
        Ok(ConvSubsampler {
            conv1_weight: store.declare(format!("{name}.conv1.weight"), &[c, 1, 3, 3], Init::Uniform(b1)),
            conv1_bias: store.declare(format!("{name}.conv1.bias"), &[c], Init::Uniform(b1)),
            conv2_weight: store.declare(format!("{name}.conv2.weight"), &[c, c, 3, 3], Init::Uniform(b2)),
            conv2_bias: store.declare(format!("{name}.conv2.bias"), &[c], Init::Uniform(b2)),
            out: Linear::new(store, &format!("{name}.out"), c * folded, d_model, true),
            feat_dim,
            channels: c,
        })
    }

    /// `feats: [B, T, D]` with per-utterance valid lengths; returns
    /// `[B, T', d_model]` and the subsampled lengths.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        feats: Var<'t>,
        lengths: &[usize],
    ) -> Result<(Var<'t>, Vec<usize>)> {
        let shape = feats.shape();
        if shape.len() != 3 || shape[2] != self.feat_dim || shape[0] != lengths.len() {
            return Err(Error::shape("subsample", &shape, &[lengths.len(), 0, self.feat_dim]));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let new_lengths = lengths
            .iter()
            .map(|&len| {
                if len > t {
                    return Err(Error::Invalid(format!("length {len} exceeds padded length {t}")));
                }
                subsampled_len(len).ok_or_else(|| {
                    Error::Invalid(format!(
                        "utterance of {len} frames too short to subsample (need >= {MIN_SUBSAMPLE_LEN})"
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let c = self.channels;
        let x = feats.reshape(&[b, 1, t, d])?;
        let x = x
            .conv2d(cx.p(self.conv1_weight), 2)?
            .add(cx.p(self.conv1_bias).reshape(&[c, 1, 1])?)?
            .relu();
        let x = x
            .conv2d(cx.p(self.conv2_weight), 2)?
            .add(cx.p(self.conv2_bias).reshape(&[c, 1, 1])?)?
            .relu();
        let s = x.shape();
        let (t2, f2) = (s[2], s[3]);
        let x = x.permute(&[0, 2, 1, 3])?.reshape(&[b, t2, c * f2])?;
        Ok((self.out.forward(cx, x)?, new_lengths))
    }
}
