use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How per-block outputs are combined into the stack output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnsembleMode {
    /// Last block output only.
    None,
    /// One learnable scalar per block.
    Base,
    /// Per-block scalars normalized with softmax.
    BaseSoftmax,
    /// Squeeze-and-excitation gates over block means.
    Se,
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EnsembleMode::None),
            "base" => Ok(EnsembleMode::Base),
            "base_softmax" => Ok(EnsembleMode::BaseSoftmax),
            "se" => Ok(EnsembleMode::Se),
            other => Err(Error::Config(format!(
                "unknown ensemble_mode {other:?} (expected none|base|base_softmax|se)"
            ))),
        }
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleMode::None => "none",
            EnsembleMode::Base => "base",
            EnsembleMode::BaseSoftmax => "base_softmax",
            EnsembleMode::Se => "se",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderPosMode {
    Relative,
    Absolute,
}

impl FromStr for DecoderPosMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(DecoderPosMode::Relative),
            "absolute" => Ok(DecoderPosMode::Absolute),
            other => Err(Error::Config(format!(
                "unknown decoder_pos_mode {other:?} (expected relative|absolute)"
            ))),
        }
    }
}

impl fmt::Display for DecoderPosMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderPosMode::Relative => "relative",
            DecoderPosMode::Absolute => "absolute",
        })
    }
}

/// CTC blank; also the padding id for decoder inputs and targets.
pub const BLANK_ID: usize = 0;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub conv_kernel: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub ensemble_mode: EnsembleMode,
    pub se_bottleneck_ratio: usize,
    /// Number of trailing encoder blocks feeding the ensemble; 0 disables it.
    pub encoder_ensemble_blocks: usize,
    /// Number of trailing decoder blocks feeding the ensemble; 0 disables it.
    pub decoder_ensemble_blocks: usize,
    pub decoder_pos_mode: DecoderPosMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 80,
            num_encoder_blocks: 12,
            num_decoder_blocks: 6,
            d_model: 256,
            heads: 4,
            d_ffn: 2048,
            conv_kernel: 15,
            vocab_size: 4233,
            dropout: 0.1,
            ensemble_mode: EnsembleMode::Se,
            se_bottleneck_ratio: 1,
            encoder_ensemble_blocks: 12,
            decoder_ensemble_blocks: 6,
            decoder_pos_mode: DecoderPosMode::Relative,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration (12 encoder / 6 decoder blocks, d_model 256).
    pub fn full(ensemble_mode: EnsembleMode) -> Self {
        ModelConfig {
            ensemble_mode,
            ..ModelConfig::default()
        }
    }

    /// Desk-scale configuration used for gradient checks and toy training.
    pub fn toy(vocab_size: usize, feat_dim: usize, ensemble_mode: EnsembleMode) -> Self {
        ModelConfig {
            feat_dim,
            num_encoder_blocks: 2,
            num_decoder_blocks: 2,
            d_model: 16,
            heads: 2,
            d_ffn: 32,
            conv_kernel: 15,
            vocab_size,
            dropout: 0.1,
            ensemble_mode,
            se_bottleneck_ratio: 1,
            encoder_ensemble_blocks: 2,
            decoder_ensemble_blocks: 2,
            decoder_pos_mode: DecoderPosMode::Relative,
        }
    }

    pub fn sos_id(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size - 1
    }

    /// Block counts actually feeding the (encoder, decoder) ensembles.
    pub fn participating_blocks(&self) -> (usize, usize) {
        if self.ensemble_mode == EnsembleMode::None {
            (0, 0)
        } else {
            (self.encoder_ensemble_blocks, self.decoder_ensemble_blocks)
        }
    }

    /// Sets the ensemble suffixes from an ablation label such as `E12D6`,
    /// `E5D5`, `E12`, `D6` or `none`.
    pub fn with_ablation(mut self, label: &str) -> Result<Self> {
        let (enc, dec) = parse_ablation(label)?;
        self.encoder_ensemble_blocks = enc;
        self.decoder_ensemble_blocks = dec;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size < 5 {
            return fail(format!(
                "vocab_size {} too small (blank, sos, eos and two content tokens)",
                self.vocab_size
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.feat_dim < crate::nn::MIN_SUBSAMPLE_LEN {
            return fail(format!("feat_dim {} too small to subsample", self.feat_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.d_ffn == 0 || self.num_encoder_blocks == 0 || self.num_decoder_blocks == 0 {
            return fail("d_ffn and block counts must be positive".into());
        }
        if self.encoder_ensemble_blocks > self.num_encoder_blocks {
            return fail(format!(
                "encoder_ensemble_blocks {} exceeds {} encoder blocks",
                self.encoder_ensemble_blocks, self.num_encoder_blocks
            ));
        }
        if self.decoder_ensemble_blocks > self.num_decoder_blocks {
            return fail(format!(
                "decoder_ensemble_blocks {} exceeds {} decoder blocks",
                self.decoder_ensemble_blocks, self.num_decoder_blocks
            ));
        }
        if self.ensemble_mode == EnsembleMode::Se {
            let r = self.se_bottleneck_ratio;
            for c in [self.encoder_ensemble_blocks, self.decoder_ensemble_blocks] {
                if r == 0 || (c > 0 && c % r != 0) {
                    return fail(format!(
                        "se_bottleneck_ratio {r} must divide the ensemble size {c}"
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_ablation(label: &str) -> Result<(usize, usize)> {
    if label.eq_ignore_ascii_case("none") {
        return Ok((0, 0));
    }
    let bad = || Error::Config(format!("bad ablation label {label:?}"));
    let (enc_part, dec_part) = match label.find('D') {
        Some(i) => (&label[..i], Some(&label[i + 1..])),
        None => (label, None),
    };
    let enc = match enc_part {
        "" => 0,
        s => s.strip_prefix('E').ok_or_else(bad)?.parse().map_err(|_| bad())?,
    };
    let dec = match dec_part {
        None => 0,
        Some(s) => s.parse().map_err(|_| bad())?,
    };
    if enc == 0 && dec == 0 {
        return Err(bad());
    }
    Ok((enc, dec))
}
