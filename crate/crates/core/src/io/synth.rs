use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_features, write_manifest, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_utts: usize,
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// Inclusive range of tokens per utterance.
    pub tokens_per_utt: (usize, usize),
    /// Inclusive range of frames each token is held for.
    pub frames_per_token: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_utts: 50,
            vocab_size: 12,
            feat_dim: 80,
            tokens_per_utt: (2, 5),
            frames_per_token: (8, 12),
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let (a, b) = self.tokens_per_utt;
        let (f, g) = self.frames_per_token;
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "synthetic vocabulary needs >= 5 ids (blank, sos, eos, two tokens), got {}",
                self.vocab_size
            )));
        }
        if a == 0 || a > b || f == 0 || f > g || self.feat_dim == 0 || !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("bad synthetic corpus settings {self:?}")));
        }
        Ok(())
    }
}

/// One fixed standard-normal pattern per vocabulary id, `[V, D]`. Only the
/// content ids `1..V-2` are ever emitted.
pub fn synth_templates(vocab_size: usize, feat_dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn([vocab_size, feat_dim], |_| normal.sample(&mut rng))
}

/// Writes `n_utts` utterances under `dir` (`feats/*.f32` plus
/// `manifest.jsonl`). Each draws random content tokens; every token holds
/// its template for a random number of frames, plus gaussian noise.
pub fn synth_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let feat_dir = dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let templates = synth_templates(cfg.vocab_size, cfg.feat_dim, cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feat_dim;
    let content = 1..cfg.vocab_size - 2;

    let mut entries = Vec::with_capacity(cfg.n_utts);
    for i in 0..cfg.n_utts {
        let n_tokens = rng.random_range(cfg.tokens_per_utt.0..=cfg.tokens_per_utt.1);
        let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.random_range(content.clone())).collect();
        let mut data = Vec::new();
        for &tok in &tokens {
            let hold = rng.random_range(cfg.frames_per_token.0..=cfg.frames_per_token.1);
            let pattern = &templates.data()[tok * d..(tok + 1) * d];
            for _ in 0..hold {
                data.extend(pattern.iter().map(|&x| x + noise.sample(&mut rng)));
            }
        }
        let t = data.len() / d;
        let utt_id = format!("utt{i:04}");
        let feat_path = format!("feats/{utt_id}.f32");
        write_features(dir.join(&feat_path), &Tensor::new([t, d], data)?)?;
        entries.push(ManifestEntry {
            utt_id,
            feat_path,
            shape: [t, d],
            tokens,
            text: None,
        });
    }
    write_manifest(dir.join("manifest.jsonl"), &entries)?;
    Ok(Manifest {
        root: dir.to_path_buf(),
        entries,
    })
}
