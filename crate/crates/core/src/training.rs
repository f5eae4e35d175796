//! Optimization recipe: warmup learning-rate schedule, Adam, global-norm
//! clipping, gradient accumulation, SpecAugment, batch samplers, the
//! training loop and checkpoint averaging.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoding::{corpus_cer, recognize, DecodeConfig};
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, Utterance};
use crate::model::{pad_features, Blockformer};
use crate::nn::{subsampled_len, Ctx};
use crate::objectives::{ctc_required_frames, hybrid_forward, HybridLossConfig};
use crate::tensor::{ParamStore, Tape, Tensor};

/// `peak · min(step / warmup, sqrt(warmup / step))`, peaking at `warmup`.
pub fn lr_schedule(step: usize, peak_lr: f64, warmup: usize) -> Result<f64> {
    if step == 0 || warmup == 0 {
        return Err(Error::Invalid("lr_schedule: step and warmup must be >= 1".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(peak_lr * (s / w).min((w / s).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    } else if state.m.len() != params.len() {
        return Err(Error::shape("adam_step state", &[state.m.len()], &[params.len()]));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every parameter of a store, reading the accumulated gradients.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            states: vec![AdamState::default(); store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let (values, grads) = store.values_and_grads_mut();
        for ((value, grad), state) in values.iter_mut().zip(grads.iter()).zip(&mut self.states) {
            adam_step(value.data_mut(), grad, state, lr, &self.config)?;
        }
        Ok(())
    }
}

/// Joint L2 norm of all gradients.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their joint norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Invalid(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecAugmentConfig {
    pub enabled: bool,
    /// Maximum frequency-mask width.
    pub freq_mask: usize,
    /// Maximum time-mask width.
    pub time_mask: usize,
    pub num_freq_masks: usize,
    pub num_time_masks: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            enabled: true,
            freq_mask: 10,
            time_mask: 50,
            num_freq_masks: 2,
            num_time_masks: 2,
        }
    }
}

/// Zeroes `num_freq_masks` bands of width `U[0, F]` and `num_time_masks`
/// spans of width `U[0, min(T_mask, T)]` at uniform positions. Returns a
/// new tensor; the input is untouched.
pub fn spec_augment<R: Rng>(feats: &Tensor, cfg: &SpecAugmentConfig, rng: &mut R) -> Result<Tensor> {
    let &[t, d] = feats.shape() else {
        return Err(Error::shape("spec_augment", feats.shape(), &[0, 0]));
    };
    let mut out = feats.clone();
    if !cfg.enabled {
        return Ok(out);
    }
    let data = out.data_mut();
    for _ in 0..cfg.num_freq_masks {
        let width = rng.random_range(0..=cfg.freq_mask.min(d));
        let start = rng.random_range(0..=d - width);
        for row in data.chunks_mut(d) {
            row[start..start + width].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    for _ in 0..cfg.num_time_masks {
        let width = rng.random_range(0..=cfg.time_mask.min(t));
        let start = rng.random_range(0..=t - width);
        data[start * d..(start + width) * d].iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(out)
}

/// How utterances are grouped into micro-batches each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    /// Uniform shuffle of all utterances, without replacement.
    Random,
    /// Length-sorted fixed packages; only the package order is shuffled.
    SortedPacked,
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Sampler::Random),
            "sorted_packed" => Ok(Sampler::SortedPacked),
            other => Err(Error::Config(format!(
                "unknown sampler {other:?} (expected random|sorted_packed)"
            ))),
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampler::Random => "random",
            Sampler::SortedPacked => "sorted_packed",
        })
    }
}

/// Micro-batches (as utterance indices) for one epoch.
pub fn epoch_batches<R: Rng>(lengths: &[usize], batch_size: usize, sampler: Sampler, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    match sampler {
        Sampler::Random => {
            order.shuffle(rng);
            order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
        }
        Sampler::SortedPacked => {
            order.sort_by_key(|&i| (lengths[i], i));
            let mut packs: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
            packs.shuffle(rng);
            packs
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub accum_steps: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub average_best_k: usize,
    pub specaug: SpecAugmentConfig,
    pub sampler: Sampler,
    /// Stop once an epoch's dev CER falls below this value; 0 disables.
    pub target_dev_cer: f64,
    /// Where per-epoch and averaged checkpoints are written, if anywhere.
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 0.002,
            warmup_steps: 500,
            clip_norm: 5.0,
            accum_steps: 4,
            adam: AdamConfig::default(),
            epochs: 20,
            batch_size: 4,
            max_steps: 0,
            average_best_k: 5,
            specaug: SpecAugmentConfig::default(),
            sampler: Sampler::Random,
            target_dev_cer: 0.0,
            out_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("warmup_steps", self.warmup_steps),
            ("accum_steps", self.accum_steps),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("average_best_k", self.average_best_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(self.peak_lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("peak_lr and clip_norm must be > 0".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        Ok(())
    }
}

/// One optimizer step's record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ctc_loss: f64,
    pub aed_loss: f64,
    /// Norm of the averaged gradient before clipping.
    pub grad_norm: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} lr {:.6e} loss {:.6} ctc_loss {:.6} aed_loss {:.6} grad_norm {:.6}",
            self.step, self.lr, self.loss, self.ctc_loss, self.aed_loss, self.grad_norm
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub dev_loss: f64,
    pub dev_cer: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} steps {} dev_loss {:.6} dev_cer {:.6}",
            self.epoch, self.steps, self.dev_loss, self.dev_cer
        )
    }
}

/// A parameter snapshot and the dev loss it achieved.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub dev_loss: f64,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// The best `average_best_k` checkpoints by dev loss, best first.
    pub best: Vec<Checkpoint>,
}

/// Drops utterances that cannot pass through the subsampler or whose
/// labels need more frames than the subsampled output offers.
pub fn filter_alignable(utts: &[Utterance]) -> Vec<&Utterance> {
    utts.iter()
        .filter(|u| {
            let frames = subsampled_len(u.feats.shape()[0]);
            let needed = ctc_required_frames(&u.tokens);
            match frames {
                Some(f) if needed <= f => true,
                _ => {
                    warn!(
                        "skipping unalignable utterance {}: {} labels need {} frames, have {:?} after subsampling",
                        u.utt_id,
                        u.tokens.len(),
                        needed,
                        frames
                    );
                    false
                }
            }
        })
        .collect()
}

/// Accumulates the gradient of the hybrid loss of one micro-batch into the
/// store and returns `(loss, ctc, aed)`.
pub fn accumulate_batch(
    model: &mut Blockformer,
    batch: &[&Utterance],
    loss_cfg: &HybridLossConfig,
    training: bool,
    dropout_seed: u64,
) -> Result<(f64, f64, f64)> {
    let feats: Vec<&Tensor> = batch.iter().map(|u| &u.feats).collect();
    let labels: Vec<Vec<usize>> = batch.iter().map(|u| u.tokens.clone()).collect();
    let (x, lengths) = pad_features(&feats)?;
    let tape = Tape::new();
    let grads = {
        let cx = if training {
            Ctx::train(&tape, &model.params, model.config.dropout, dropout_seed)
        } else {
            Ctx::eval(&tape, &model.params)
        };
        let parts = hybrid_forward(model, &cx, tape.constant(x), &lengths, &labels, loss_cfg)?;
        let values = (
            parts.total.value().item(),
            parts.ctc.value().item(),
            parts.aed.value().item(),
        );
        (tape.backward(parts.total)?, values)
    };
    grads.0.accumulate_into(&mut model.params);
    Ok(grads.1)
}

/// Hybrid loss over a set in evaluation mode, weighted by utterance.
pub fn evaluate_loss(model: &Blockformer, utts: &[&Utterance], loss_cfg: &HybridLossConfig, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in utts.chunks(batch_size.max(1)) {
        let feats: Vec<&Tensor> = chunk.iter().map(|u| &u.feats).collect();
        let labels: Vec<Vec<usize>> = chunk.iter().map(|u| u.tokens.clone()).collect();
        let (x, lengths) = pad_features(&feats)?;
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &model.params);
        let parts = hybrid_forward(model, &cx, tape.constant(x), &lengths, &labels, loss_cfg)?;
        total += parts.total.value().item() * chunk.len() as f64;
    }
    Ok(total / utts.len().max(1) as f64)
}

/// Corpus CER of two-pass decoding over a set.
pub fn evaluate_cer(model: &Blockformer, utts: &[&Utterance], decode_cfg: &DecodeConfig) -> Result<f64> {
    let pairs = utts
        .iter()
        .map(|u| Ok((recognize(model, &u.feats, decode_cfg)?.tokens, u.tokens.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(corpus_cer(&pairs))
}

/// Trains `model` in place and finally loads the average of the best
/// `average_best_k` per-epoch checkpoints (by dev loss) into it.
///
/// Each optimizer step sums gradients over `accum_steps` micro-batches,
/// divides by `accum_steps`, clips to `clip_norm` and applies Adam at the
/// scheduled rate. Micro-batches run sequentially for reproducibility.
pub fn train_loop(
    model: &mut Blockformer,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    loss_cfg: &HybridLossConfig,
    decode_cfg: &DecodeConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let train = filter_alignable(train);
    let dev = filter_alignable(dev);
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Invalid("training needs non-empty train and dev sets".into()));
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let lengths: Vec<usize> = train.iter().map(|u| u.feats.shape()[0]).collect();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    augment_rng.set_stream(1);
    let mut optimizer = Adam::new(cfg.adam, &model.params);
    model.params.zero_grad();

    let mut report = TrainReport {
        steps: Vec::new(),
        epochs: Vec::new(),
        best: Vec::new(),
    };
    let mut step = 0;
    let mut micro = 0u64;
    let mut window = (0usize, 0.0, 0.0, 0.0);
    let mut done = false;

    for epoch in 1..=cfg.epochs {
        for batch in epoch_batches(&lengths, cfg.batch_size, cfg.sampler, &mut sample_rng) {
            let augmented: Vec<Utterance> = batch
                .iter()
                .map(|&i| {
                    Ok(Utterance {
                        utt_id: train[i].utt_id.clone(),
                        feats: spec_augment(&train[i].feats, &cfg.specaug, &mut augment_rng)?,
                        tokens: train[i].tokens.clone(),
                    })
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Utterance> = augmented.iter().collect();
            micro += 1;
            let dropout_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(micro);
            let (loss, ctc, aed) = accumulate_batch(model, &refs, loss_cfg, true, dropout_seed)?;
            window = (window.0 + 1, window.1 + loss, window.2 + ctc, window.3 + aed);
            if window.0 < cfg.accum_steps {
                continue;
            }

            step += 1;
            let n = window.0 as f64;
            let grads = model.params.grads_mut();
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            let grad_norm = clip_global_norm(grads, cfg.clip_norm)?;
            let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps)?;
            optimizer.step(&mut model.params, lr)?;
            model.params.zero_grad();
            let log = StepLog {
                step,
                lr,
                loss: window.1 / n,
                ctc_loss: window.2 / n,
                aed_loss: window.3 / n,
                grad_norm,
            };
            info!("{log}");
            report.steps.push(log);
            window = (0, 0.0, 0.0, 0.0);
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                done = true;
                break;
            }
        }

        let dev_loss = evaluate_loss(model, &dev, loss_cfg, cfg.batch_size)?;
        let dev_cer = evaluate_cer(model, &dev, decode_cfg)?;
        let log = EpochLog {
            epoch,
            steps: step,
            dev_loss,
            dev_cer,
        };
        info!("{log}");
        report.epochs.push(log);
        let params = model.params.named_values();
        if let Some(dir) = &cfg.out_dir {
            save_checkpoint(dir.join(format!("epoch{epoch}.ckpt")), &params)?;
        }
        report.best.push(Checkpoint {
            epoch,
            dev_loss,
            params,
        });
        report.best.sort_by(|a, b| a.dev_loss.total_cmp(&b.dev_loss).then(b.epoch.cmp(&a.epoch)));
        report.best.truncate(cfg.average_best_k);

        if done || (cfg.target_dev_cer > 0.0 && dev_cer < cfg.target_dev_cer) {
            break;
        }
    }

    let sets: Vec<&[(String, Tensor)]> = report.best.iter().map(|c| c.params.as_slice()).collect();
    let averaged = average_checkpoints(&sets)?;
    model.params.load_named(&averaged)?;
    if let Some(dir) = &cfg.out_dir {
        save_checkpoint(dir.join("averaged.ckpt"), &averaged)?;
    }
    Ok(report)
}

/// Elementwise mean of parameter sets with identical names and shapes.
pub fn average_checkpoints(sets: &[&[(String, Tensor)]]) -> Result<Vec<(String, Tensor)>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Invalid("average_checkpoints needs at least one checkpoint".into()))?;
    if sets.len() == 1 {
        return Ok(first.to_vec());
    }
    for (k, set) in sets.iter().enumerate().skip(1) {
        let consistent = set.len() == first.len()
            && set
                .iter()
                .zip(first.iter())
                .all(|((n, t), (n0, t0))| n == n0 && t.shape() == t0.shape());
        if !consistent {
            return Err(Error::Checkpoint(format!(
                "checkpoint {k} does not match the names/shapes of checkpoint 0"
            )));
        }
    }
    // running mean: copies of one checkpoint average to it bit for bit
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, (name, t0))| {
            let mut mean = t0.data().to_vec();
            for (k, set) in sets.iter().enumerate().skip(1) {
                let n = (k + 1) as f64;
                for (m, x) in mean.iter_mut().zip(set[i].1.data()) {
                    *m += (x - *m) / n;
                }
            }
            (name.clone(), Tensor::new(t0.shape().to_vec(), mean).expect("same shape"))
        })
        .collect())
}
