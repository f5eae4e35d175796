//! Training objectives: CTC negative log-likelihood by the log-space forward
//! algorithm, label-smoothed cross-entropy for the attention decoder, and
//! their convex combination.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Blockformer, BLANK_ID};
use crate::nn::Ctx;
use crate::tensor::{Tensor, Var};

/// Finite stand-in for `log 0` on the CTC lattice.
pub const LOG_ZERO: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HybridLossConfig {
    /// Weight of the CTC branch.
    pub lambda: f64,
    pub label_smoothing: f64,
}

impl Default for HybridLossConfig {
    fn default() -> Self {
        HybridLossConfig {
            lambda: 0.3,
            label_smoothing: 0.1,
        }
    }
}

impl HybridLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("ctc weight {} not in (0, 1)", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} not in [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Fewest frames that can emit `labels`: one per label plus a separating
/// blank between each pair of equal neighbours.
pub fn ctc_required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `labels` under `log_probs: [T, V]`
/// (class 0 is the blank).
pub fn ctc_loss<'t>(log_probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(Error::shape("ctc_loss", &shape, &[0, 0]));
    }
    let (t, v) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= v || l == BLANK_ID) {
        return Err(Error::Index {
            what: "ctc label".into(),
            index: bad,
            bound: v,
        });
    }
    let required = ctc_required_frames(labels);
    if required > t {
        return Err(Error::Unalignable {
            labels: labels.len(),
            required,
            frames: t,
        });
    }

    let ext: Vec<usize> = std::iter::once(BLANK_ID)
        .chain(labels.iter().flat_map(|&l| [l, BLANK_ID]))
        .collect();
    let s = ext.len();
    let emit_index: Vec<Option<usize>> =
        (0..t).flat_map(|f| ext.iter().map(move |&c| Some(f * v + c))).collect();
    let emissions = log_probs.gather(Arc::new(emit_index), 0.0, &[t, s])?;

    let start: Vec<Option<usize>> = (0..s).map(|i| (i < 2).then_some(i)).collect();
    let mut alpha = emissions.narrow(0, 0, 1)?.reshape(&[s])?.gather(Arc::new(start), LOG_ZERO, &[s])?;

    let shift1: Arc<Vec<Option<usize>>> = Arc::new((0..s).map(|i| i.checked_sub(1)).collect());
    let shift2: Arc<Vec<Option<usize>>> = Arc::new(
        (0..s)
            .map(|i| (i >= 2 && ext[i] != BLANK_ID && ext[i] != ext[i - 2]).then(|| i - 2))
            .collect(),
    );
    for f in 1..t {
        let prev1 = alpha.gather(Arc::clone(&shift1), LOG_ZERO, &[s])?;
        let prev2 = alpha.gather(Arc::clone(&shift2), LOG_ZERO, &[s])?;
        let emit = emissions.narrow(0, f, 1)?.reshape(&[s])?;
        alpha = alpha.log_add_exp(prev1)?.log_add_exp(prev2)?.add(emit)?;
    }
    let last = alpha.narrow(0, s - 1, 1)?;
    let total = if s > 1 {
        last.log_add_exp(alpha.narrow(0, s - 2, 1)?)?
    } else {
        last
    };
    Ok(total.reshape(&[])?.scale(-1.0))
}

/// Mean CTC loss over a batch; `log_probs: [B, T, V]`, utterance `b` uses
/// its first `lengths[b]` frames.
pub fn ctc_loss_batch<'t>(log_probs: Var<'t>, lengths: &[usize], labels: &[Vec<usize>]) -> Result<Var<'t>> {
    let shape = log_probs.shape();
    if shape.len() != 3 || shape[0] != lengths.len() || labels.len() != lengths.len() || lengths.is_empty() {
        return Err(Error::shape("ctc_loss_batch", &shape, &[lengths.len(), labels.len()]));
    }
    let (t, v) = (shape[1], shape[2]);
    let mut total: Option<Var<'t>> = None;
    for (b, (&len, lab)) in lengths.iter().zip(labels).enumerate() {
        if len == 0 || len > t {
            return Err(Error::Invalid(format!("ctc length {len} outside 1..={t}")));
        }
        let lp = log_probs.narrow(0, b, 1)?.reshape(&[t, v])?.narrow(0, 0, len)?;
        let loss = ctc_loss(lp, lab)?;
        total = Some(match total {
            Some(acc) => acc.add(loss)?,
            None => loss,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / lengths.len() as f64))
}

/// Cross-entropy against the smoothed target distribution (`1 - ε` on the
/// target, `ε / (V - 1)` on each other class), averaged over positions whose
/// target is not `pad_id`. `logits: [..., V]`, `targets` in row-major order.
pub fn label_smoothed_ce<'t>(logits: Var<'t>, targets: &[usize], epsilon: f64, pad_id: usize) -> Result<Var<'t>> {
    let shape = logits.shape();
    let v = *shape.last().ok_or_else(|| Error::Invalid("logits must have a class axis".into()))?;
    let n = targets.len();
    if shape.iter().product::<usize>() != n * v || v < 2 {
        return Err(Error::shape("label_smoothed_ce", &shape, &[n, v]));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Invalid(format!("label smoothing {epsilon} not in [0, 1)")));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Index {
            what: "target id".into(),
            index: bad,
            bound: v,
        });
    }
    let count = targets.iter().filter(|&&t| t != pad_id).count();
    if count == 0 {
        return Err(Error::Invalid("label_smoothed_ce: every target is padding".into()));
    }
    let off = epsilon / (v - 1) as f64;
    let weights = Tensor::from_fn([n, v], |i| {
        let (row, class) = (i / v, i % v);
        match targets[row] {
            t if t == pad_id => 0.0,
            t if t == class => 1.0 - epsilon,
            _ => off,
        }
    });
    let logp = logits.reshape(&[n, v])?.log_softmax(1)?;
    Ok(logp
        .mul(logits.tape().constant(weights))?
        .sum_all()
        .scale(-1.0 / count as f64))
}

/// `λ · ctc + (1 - λ) · aed`.
pub fn hybrid_loss<'t>(ctc: Var<'t>, aed: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Invalid(format!("ctc weight {lambda} not in (0, 1)")));
    }
    ctc.scale(lambda).add(aed.scale(1.0 - lambda))
}

/// Loss terms from one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub ctc: Var<'t>,
    pub aed: Var<'t>,
}

/// Decoder input `[sos, y...]` and target `[y..., eos]` for a label sequence.
pub fn teacher_forcing_pair(labels: &[usize], sos: usize, eos: usize) -> (Vec<usize>, Vec<usize>) {
    let input = std::iter::once(sos).chain(labels.iter().copied()).collect();
    let target = labels.iter().copied().chain(std::iter::once(eos)).collect();
    (input, target)
}

/// Full hybrid objective for a padded batch `feats: [B, T, D]`.
pub fn hybrid_forward<'t>(
    model: &Blockformer,
    cx: &Ctx<'t>,
    feats: Var<'t>,
    lengths: &[usize],
    labels: &[Vec<usize>],
    cfg: &HybridLossConfig,
) -> Result<LossParts<'t>> {
    let enc = model.encode(cx, feats, lengths)?;
    let ctc = ctc_loss_batch(model.ctc_log_probs(cx, &enc)?, &enc.lengths, labels)?;

    let (sos, eos) = (model.config.sos_id(), model.config.eos_id());
    let (inputs, targets): (Vec<_>, Vec<_>) =
        labels.iter().map(|l| teacher_forcing_pair(l, sos, eos)).unzip();
    let logits = model.decode_forward(cx, &enc, &inputs)?;
    let l = logits.shape()[1];
    let flat: Vec<usize> = targets
        .iter()
        .flat_map(|t| t.iter().copied().chain(std::iter::repeat(BLANK_ID)).take(l))
        .collect();
    let aed = label_smoothed_ce(logits, &flat, cfg.label_smoothing, BLANK_ID)?;
    Ok(LossParts {
        total: hybrid_loss(ctc, aed, cfg.lambda)?,
        ctc,
        aed,
    })
}
