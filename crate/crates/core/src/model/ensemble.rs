//! Block ensembles: combine the outputs of the last `C` blocks of a stack
//! into one representation.

use super::blocks::frame_mask;
use super::config::EnsembleMode;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::{Init, ParamId, ParamStore, Tensor, Var};

fn check_outputs(op: &'static str, ys: &[Var<'_>]) -> Result<Vec<usize>> {
    let first = ys
        .first()
        .ok_or_else(|| Error::Invalid(format!("{op}: empty block output list")))?
        .shape();
    for y in &ys[1..] {
        if y.shape() != first {
            return Err(Error::shape(op, &first, &y.shape()));
        }
    }
    Ok(first)
}

/// Weighted sum `Σ α_i y_i`; with `softmax` the weights are `softmax(α)`.
/// `alpha` has shape `[C]`.
pub fn base_wsbo<'t>(alpha: Var<'t>, softmax: bool, ys: &[Var<'t>]) -> Result<Var<'t>> {
    let shape = check_outputs("base_wsbo", ys)?;
    if alpha.shape() != [ys.len()] {
        return Err(Error::shape("base_wsbo", &alpha.shape(), &[ys.len()]));
    }
    let weights = if softmax { alpha.softmax(0)? } else { alpha };
    let ones = vec![1; shape.len()];
    let mut acc: Option<Var<'t>> = None;
    for (c, &y) in ys.iter().enumerate() {
        let term = y.mul(weights.narrow(0, c, 1)?.reshape(&ones)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Per-utterance global mean of each block output over valid positions:
/// `ys[c]: [B, T, D]` gives `z: [B, C]`. Without `lengths` every frame counts.
pub fn se_squeeze<'t>(ys: &[Var<'t>], lengths: Option<&[usize]>) -> Result<Var<'t>> {
    let shape = check_outputs("se_squeeze", ys)?;
    if shape.len() != 3 {
        return Err(Error::shape("se_squeeze", &shape, &[0, 0, 0]));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let tape = ys[0].tape();
    let full = vec![t; b];
    let lengths = lengths.unwrap_or(&full);
    if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > t) {
        return Err(Error::Invalid(format!(
            "se_squeeze: lengths {lengths:?} invalid for batch {b} x {t} frames"
        )));
    }
    let valid = tape.constant(frame_mask(lengths, t));
    let inv_count = tape.constant(Tensor::from_fn([b], |i| 1.0 / (lengths[i] * d) as f64));
    let cols = ys
        .iter()
        .map(|&y| y.mul(valid)?.sum(&[1, 2], false)?.mul(inv_count)?.reshape(&[b, 1]))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&cols, 1)
}

/// Excitation `s = σ(W2 · relu(W1 · z))` for `z: [B, C]`, with
/// `W1: [C/r, C]` and `W2: [C, C/r]`.
pub fn se_excite<'t>(w1: Var<'t>, w2: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let (s1, s2, sz) = (w1.shape(), w2.shape(), z.shape());
    if sz.len() != 2 || s1.len() != 2 || s2.len() != 2 || s1[1] != sz[1] || s2 != [s1[1], s1[0]] {
        return Err(Error::shape("se_excite", &s1, &sz));
    }
    let h = z.matmul(w1.transpose()?)?.relu();
    Ok(h.matmul(w2.transpose()?)?.sigmoid())
}

/// `Σ_c s_c · y_c` with gates from [`se_excite`] over [`se_squeeze`].
pub fn se_wsbo<'t>(
    w1: Var<'t>,
    w2: Var<'t>,
    ys: &[Var<'t>],
    lengths: Option<&[usize]>,
) -> Result<Var<'t>> {
    let s = se_excite(w1, w2, se_squeeze(ys, lengths)?)?;
    let b = s.shape()[0];
    let mut acc: Option<Var<'t>> = None;
    for (c, &y) in ys.iter().enumerate() {
        let gate = s.narrow(1, c, 1)?.reshape(&[b, 1, 1])?;
        let term = y.mul(gate)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Learnable state of one stack's ensemble.
#[derive(Clone, Debug)]
pub enum BlockEnsemble {
    Base {
        alpha: ParamId,
        softmax: bool,
        blocks: usize,
    },
    Se {
        w1: ParamId,
        w2: ParamId,
        blocks: usize,
    },
}

impl BlockEnsemble {
    /// `None` when the mode is `none` or no blocks participate.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mode: EnsembleMode,
        blocks: usize,
        ratio: usize,
    ) -> Result<Option<Self>> {
        if blocks == 0 {
            return Ok(None);
        }
        let c = blocks;
        Ok(match mode {
            EnsembleMode::None => None,
            EnsembleMode::Base => Some(BlockEnsemble::Base {
                alpha: store.declare(format!("{name}.alpha"), &[c], Init::Constant(1.0 / c as f64)),
                softmax: false,
                blocks: c,
            }),
            EnsembleMode::BaseSoftmax => Some(BlockEnsemble::Base {
                alpha: store.declare(format!("{name}.alpha"), &[c], Init::Zeros),
                softmax: true,
                blocks: c,
            }),
            EnsembleMode::Se => {
                if ratio == 0 || c % ratio != 0 {
                    return Err(Error::Config(format!(
                        "bottleneck ratio {ratio} does not divide {c} blocks"
                    )));
                }
                let bound = Init::Uniform(1.0 / (c as f64).sqrt());
                Some(BlockEnsemble::Se {
                    w1: store.declare(format!("{name}.W1"), &[c / ratio, c], bound),
                    w2: store.declare(format!("{name}.W2"), &[c, c / ratio], bound),
                    blocks: c,
                })
            }
        })
    }

    pub fn blocks(&self) -> usize {
        match self {
            BlockEnsemble::Base { blocks, .. } | BlockEnsemble::Se { blocks, .. } => *blocks,
        }
    }

    /// Combines the trailing `blocks()` entries of `outputs`.
    pub fn combine<'t>(&self, cx: &Ctx<'t>, outputs: &[Var<'t>], lengths: &[usize]) -> Result<Var<'t>> {
        let c = self.blocks();
        if outputs.len() < c {
            return Err(Error::Invalid(format!(
                "ensemble over {c} blocks given {} outputs",
                outputs.len()
            )));
        }
        let ys = &outputs[outputs.len() - c..];
        match *self {
            BlockEnsemble::Base { alpha, softmax, .. } => base_wsbo(cx.p(alpha), softmax, ys),
            BlockEnsemble::Se { w1, w2, .. } => se_wsbo(cx.p(w1), cx.p(w2), ys, Some(lengths)),
        }
    }
}
