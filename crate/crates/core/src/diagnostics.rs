//! Whole-model gradient verification against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{pad_features, Blockformer, ModelConfig};
use crate::nn::{subsampled_len, Ctx, MIN_SUBSAMPLE_LEN};
use crate::objectives::{hybrid_forward, HybridLossConfig};
use crate::tensor::{check_param_gradients, ParamGradCheck, Tape, Tensor};

/// Builds a model at a generic point of parameter space: freshly
/// initialized, then with every layer-norm gain and shift jittered by
/// `U(-0.2, 0.2)`.
///
/// At initialization each block ends in a layer norm with unit gain and
/// zero shift, so every block output has zero mean over features and the
/// squeeze statistics are exactly zero. That places the excitation relu on
/// its kink, where central differences are meaningless.
pub fn jittered_model(config: ModelConfig, seed: u64) -> Result<Blockformer> {
    let mut model = Blockformer::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id);
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            for x in model.params.value_mut(id).data_mut() {
                *x += rng.random_range(-0.2..0.2);
            }
        }
    }
    Ok(model)
}

/// A two-utterance random batch: features, frame counts and label
/// sequences short enough to align after subsampling.
pub fn random_batch(config: &ModelConfig, frames: [usize; 2], seed: u64) -> Result<(Tensor, Vec<usize>, Vec<Vec<usize>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats: Vec<Tensor> = frames
        .iter()
        .map(|&t| {
            let t = t.max(MIN_SUBSAMPLE_LEN);
            Tensor::from_fn([t, config.feat_dim], |_| rng.random_range(-1.0..1.0))
        })
        .collect();
    let labels = feats
        .iter()
        .map(|f| {
            let frames = subsampled_len(f.shape()[0]).unwrap_or(1);
            let n = frames.clamp(1, 3);
            let mut seq: Vec<usize> = Vec::with_capacity(n);
            while seq.len() < n {
                let tok = rng.random_range(1..config.sos_id());
                if seq.last() != Some(&tok) {
                    seq.push(tok);
                }
            }
            seq
        })
        .collect();
    let refs: Vec<&Tensor> = feats.iter().collect();
    let (x, lengths) = pad_features(&refs)?;
    Ok((x, lengths, labels))
}

/// Smallest distance from a relu kink accepted for a checked point. A
/// step of `h` moves any relu input by far less than this, so the central
/// difference never straddles a kink.
pub const RELU_MARGIN: f64 = 1e-4;

const MAX_BATCH_ATTEMPTS: u64 = 100;

#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub params: Vec<ParamGradCheck>,
    /// Seed of the random batch the check ran on.
    pub batch_seed: u64,
    pub relu_margin: f64,
}

impl ModelGradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Checks every parameter's gradient of the hybrid loss of a random
/// two-utterance batch (`frames` input frames each) against central
/// differences with step `h`. Batches are drawn from successive seeds until
/// every relu input is at least [`RELU_MARGIN`] from zero.
pub fn model_gradient_check(
    config: &ModelConfig,
    loss_cfg: &HybridLossConfig,
    frames: [usize; 2],
    h: f64,
    seed: u64,
) -> Result<ModelGradCheck> {
    let model = jittered_model(config.clone(), seed)?;
    let mut attempt = 0;
    let (batch_seed, batch, relu_margin) = loop {
        let batch_seed = seed.wrapping_add(attempt);
        let batch = random_batch(config, frames, batch_seed)?;
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &model.params);
        hybrid_forward(&model, &cx, tape.constant(batch.0.clone()), &batch.1, &batch.2, loss_cfg)?;
        let margin = tape.relu_margin();
        attempt += 1;
        if margin >= RELU_MARGIN || attempt == MAX_BATCH_ATTEMPTS {
            break (batch_seed, batch, margin);
        }
    };
    let (x, lengths, labels) = batch;
    let params = check_param_gradients(
        &model.params,
        |tape, params| {
            let cx = Ctx::eval(tape, params);
            Ok(hybrid_forward(&model, &cx, tape.constant(x.clone()), &lengths, &labels, loss_cfg)?.total)
        },
        h,
    )?;
    Ok(ModelGradCheck {
        params,
        batch_seed,
        relu_margin,
    })
}

/// Collapses per-tensor results to per-module rows (parameter name minus
/// its last component), keeping the worst error of each.
pub fn by_module(report: &[ParamGradCheck]) -> Vec<(String, usize, f64)> {
    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    for r in report {
        let module = r.name.rsplit_once('.').map_or(r.name.as_str(), |(m, _)| m).to_string();
        match rows.iter_mut().find(|(m, _, _)| *m == module) {
            Some(row) => {
                row.1 += r.numel;
                row.2 = row.2.max(r.max_rel_err);
            }
            None => rows.push((module, r.numel, r.max_rel_err)),
        }
    }
    rows
}
