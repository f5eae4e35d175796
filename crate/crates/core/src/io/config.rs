use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::HybridLossConfig;
use crate::training::TrainConfig;

/// Every setting a command can use, addressable by flat `key=value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: HybridLossConfig,
    pub decode: DecodeConfig,
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: HybridLossConfig::default(),
            decode: DecodeConfig::default(),
            train_manifest: None,
            dev_manifest: None,
            manifest: None,
            checkpoint: None,
            output: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "feat_dim" => m.feat_dim = parse(key, v)?,
            "num_encoder_blocks" => m.num_encoder_blocks = parse(key, v)?,
            "num_decoder_blocks" => m.num_decoder_blocks = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "d_ffn" => m.d_ffn = parse(key, v)?,
            "conv_kernel" => m.conv_kernel = parse(key, v)?,
            "vocab_size" => m.vocab_size = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "ensemble_mode" => m.ensemble_mode = parse(key, v)?,
            "se_bottleneck_ratio" => m.se_bottleneck_ratio = parse(key, v)?,
            "encoder_ensemble_blocks" => m.encoder_ensemble_blocks = parse(key, v)?,
            "decoder_ensemble_blocks" => m.decoder_ensemble_blocks = parse(key, v)?,
            "decoder_pos_mode" => m.decoder_pos_mode = parse(key, v)?,
            "peak_lr" => t.peak_lr = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "accum_steps" => t.accum_steps = parse(key, v)?,
            "adam_beta1" => t.adam.beta1 = parse(key, v)?,
            "adam_beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_steps" => t.max_steps = parse(key, v)?,
            "average_best_k" => t.average_best_k = parse(key, v)?,
            "sampler" => t.sampler = parse(key, v)?,
            "target_dev_cer" => t.target_dev_cer = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "out_dir" => t.out_dir = path(v),
            "specaug" => t.specaug.enabled = parse(key, v)?,
            "specaug_freq_mask" => t.specaug.freq_mask = parse(key, v)?,
            "specaug_time_mask" => t.specaug.time_mask = parse(key, v)?,
            "specaug_num_freq_masks" => t.specaug.num_freq_masks = parse(key, v)?,
            "specaug_num_time_masks" => t.specaug.num_time_masks = parse(key, v)?,
            "ctc_weight" => self.loss.lambda = parse(key, v)?,
            "label_smoothing" => self.loss.label_smoothing = parse(key, v)?,
            "beam_size" => self.decode.beam_size = parse(key, v)?,
            "decode_ctc_weight" => self.decode.lambda_dec = parse(key, v)?,
            "train_manifest" => self.train_manifest = path(v),
            "dev_manifest" => self.dev_manifest = path(v),
            "manifest" => self.manifest = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "output" => self.output = path(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, a) = (&self.model, &self.train, &self.train.specaug);
        vec![
            ("feat_dim", m.feat_dim.to_string()),
            ("num_encoder_blocks", m.num_encoder_blocks.to_string()),
            ("num_decoder_blocks", m.num_decoder_blocks.to_string()),
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("d_ffn", m.d_ffn.to_string()),
            ("conv_kernel", m.conv_kernel.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("dropout", m.dropout.to_string()),
            ("ensemble_mode", m.ensemble_mode.to_string()),
            ("se_bottleneck_ratio", m.se_bottleneck_ratio.to_string()),
            ("encoder_ensemble_blocks", m.encoder_ensemble_blocks.to_string()),
            ("decoder_ensemble_blocks", m.decoder_ensemble_blocks.to_string()),
            ("decoder_pos_mode", m.decoder_pos_mode.to_string()),
            ("peak_lr", t.peak_lr.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("accum_steps", t.accum_steps.to_string()),
            ("adam_beta1", t.adam.beta1.to_string()),
            ("adam_beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("average_best_k", t.average_best_k.to_string()),
            ("sampler", t.sampler.to_string()),
            ("target_dev_cer", t.target_dev_cer.to_string()),
            ("seed", t.seed.to_string()),
            ("out_dir", show(&t.out_dir)),
            ("specaug", a.enabled.to_string()),
            ("specaug_freq_mask", a.freq_mask.to_string()),
            ("specaug_time_mask", a.time_mask.to_string()),
            ("specaug_num_freq_masks", a.num_freq_masks.to_string()),
            ("specaug_num_time_masks", a.num_time_masks.to_string()),
            ("ctc_weight", self.loss.lambda.to_string()),
            ("label_smoothing", self.loss.label_smoothing.to_string()),
            ("beam_size", self.decode.beam_size.to_string()),
            ("decode_ctc_weight", self.decode.lambda_dec.to_string()),
            ("train_manifest", show(&self.train_manifest)),
            ("dev_manifest", show(&self.dev_manifest)),
            ("manifest", show(&self.manifest)),
            ("checkpoint", show(&self.checkpoint)),
            ("output", show(&self.output)),
        ]
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            self.set(key.trim(), value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// The effective configuration as `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.decode.beam_size == 0 || !(0.0..=1.0).contains(&self.decode.lambda_dec) {
            return Err(Error::Config("beam_size must be >= 1 and decode_ctc_weight in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("ensemble_mode", "base_softmax").unwrap();
        cfg.set("out_dir", "runs/a").unwrap();
        cfg.set("peak_lr", "0.005").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("d_model = 8\nbogus = 1\n", Path::new("c.conf")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert_eq!(cfg.model.d_model, 8);
        assert!(cfg.set("heads", "two").is_err());
    }
}
