//! The encoder-decoder recognizer: convolutional subsampling, a stack of
//! conformer blocks, a transformer decoder, block ensembles over both
//! stacks, and a CTC projection on the encoder output.

mod blocks;
mod config;
mod ensemble;

use crate::error::{Error, Result};
use crate::nn::{abs_pos_encoding, causal_mask, key_padding_mask, ConvSubsampler, Ctx, Embedding, Linear};
use crate::tensor::{ParamStore, Tensor, Var};

pub use blocks::{frame_mask, ConformerBlock, ConvModule, DecoderBlock, DecoderSelfAttention, FeedForward};
pub use config::{parse_ablation, DecoderPosMode, EnsembleMode, ModelConfig, BLANK_ID};
pub use ensemble::{base_wsbo, se_excite, se_squeeze, se_wsbo, BlockEnsemble};

/// Encoder result for a batch.
#[derive(Clone, Debug)]
pub struct Encoded<'t> {
    /// `[B, T', d_model]`, the ensemble output (or last block when disabled).
    pub output: Var<'t>,
    /// Valid subsampled lengths per utterance.
    pub lengths: Vec<usize>,
    /// Number of block outputs the encoder ensemble consumed.
    pub ensemble_inputs: usize,
}

#[derive(Clone, Debug)]
pub struct Blockformer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub subsample: ConvSubsampler,
    pub encoder: Vec<ConformerBlock>,
    pub encoder_ensemble: Option<BlockEnsemble>,
    pub embed: Embedding,
    pub decoder: Vec<DecoderBlock>,
    pub decoder_ensemble: Option<BlockEnsemble>,
    pub output: Linear,
    pub ctc: Linear,
}

impl Blockformer {
    /// Builds and initializes a model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::declare(config)?;
        model.params.materialize(seed);
        Ok(model)
    }

    /// Declares the parameters without drawing values; enough for counting.
    pub fn declare(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut s = ParamStore::new();
        let subsample = ConvSubsampler::new(&mut s, "encoder.subsample", c.feat_dim, c.d_model)?;
        let encoder = (0..c.num_encoder_blocks)
            .map(|i| {
                ConformerBlock::new(
                    &mut s,
                    &format!("encoder.block{i}"),
                    c.d_model,
                    c.heads,
                    c.d_ffn,
                    c.conv_kernel,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (enc_c, dec_c) = c.participating_blocks();
        let encoder_ensemble =
            BlockEnsemble::new(&mut s, "encoder.ensemble", c.ensemble_mode, enc_c, c.se_bottleneck_ratio)?;
        let embed = Embedding::new(&mut s, "decoder.embed", c.vocab_size, c.d_model);
        let decoder = (0..c.num_decoder_blocks)
            .map(|i| {
                DecoderBlock::new(
                    &mut s,
                    &format!("decoder.block{i}"),
                    c.d_model,
                    c.heads,
                    c.d_ffn,
                    c.decoder_pos_mode,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_ensemble =
            BlockEnsemble::new(&mut s, "decoder.ensemble", c.ensemble_mode, dec_c, c.se_bottleneck_ratio)?;
        let output = Linear::new(&mut s, "decoder.output", c.d_model, c.vocab_size, true);
        let ctc = Linear::new(&mut s, "ctc.proj", c.d_model, c.vocab_size, true);
        Ok(Blockformer {
            config,
            params: s,
            subsample,
            encoder,
            encoder_ensemble,
            embed,
            decoder,
            decoder_ensemble,
            output,
            ctc,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Block counts feeding the (encoder, decoder) ensembles.
    pub fn participating_blocks(&self) -> (usize, usize) {
        (
            self.encoder_ensemble.as_ref().map_or(0, BlockEnsemble::blocks),
            self.decoder_ensemble.as_ref().map_or(0, BlockEnsemble::blocks),
        )
    }

    /// `feats: [B, T, feat_dim]` with valid frame counts per utterance.
    pub fn encode<'t>(&self, cx: &Ctx<'t>, feats: Var<'t>, lengths: &[usize]) -> Result<Encoded<'t>> {
        let (x, lengths) = self.subsample.forward(cx, feats, lengths)?;
        let mut x = cx.dropout(x)?;
        let mut outputs = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward(cx, x, &lengths)?;
            outputs.push(x);
        }
        let (output, ensemble_inputs) = match &self.encoder_ensemble {
            Some(e) => (e.combine(cx, &outputs, &lengths)?, e.blocks()),
            None => (x, 0),
        };
        Ok(Encoded {
            output,
            lengths,
            ensemble_inputs,
        })
    }

    /// Teacher-forced decoder logits `[N, L, V]`. Each of the `N` input
    /// sequences must start with the start-of-sequence id; shorter ones are
    /// padded. `N` must equal the encoder batch, or the encoder batch must be
    /// 1, in which case its output is shared by every sequence.
    pub fn decode_forward<'t>(&self, cx: &Ctx<'t>, enc: &Encoded<'t>, inputs: &[Vec<usize>]) -> Result<Var<'t>> {
        let n = inputs.len();
        let enc_b = enc.lengths.len();
        if n == 0 || (enc_b != n && enc_b != 1) {
            return Err(Error::Invalid(format!(
                "decode_forward: {n} sequences for an encoder batch of {enc_b}"
            )));
        }
        let sos = self.config.sos_id();
        let lengths: Vec<usize> = inputs.iter().map(Vec::len).collect();
        if let Some(i) = inputs.iter().position(|s| s.first() != Some(&sos)) {
            return Err(Error::Invalid(format!(
                "decoder input {i} does not start with the start-of-sequence id {sos}"
            )));
        }
        let l = *lengths.iter().max().expect("non-empty");
        let ids: Vec<usize> = inputs
            .iter()
            .flat_map(|s| s.iter().copied().chain(std::iter::repeat(BLANK_ID)).take(l))
            .collect();

        let (memory, memory_lengths) = if enc_b == n {
            (enc.output, enc.lengths.clone())
        } else {
            let shared = enc.output.mul(cx.constant(Tensor::ones([n, 1, 1])))?;
            (shared, vec![enc.lengths[0]; n])
        };
        let memory_mask = key_padding_mask(&memory_lengths, memory.shape()[1]);
        let self_mask = causal_mask(&lengths, l);

        let mut x = self.embed.forward(cx, &ids, &[n, l])?;
        if self.config.decoder_pos_mode == DecoderPosMode::Absolute {
            x = x.add(cx.constant(abs_pos_encoding(l, self.config.d_model)))?;
        }
        let mut x = cx.dropout(x)?;
        let mut outputs = Vec::with_capacity(self.decoder.len());
        for block in &self.decoder {
            x = block.forward(cx, x, &self_mask, memory, &memory_mask)?;
            outputs.push(x);
        }
        let y = match &self.decoder_ensemble {
            Some(e) => e.combine(cx, &outputs, &lengths)?,
            None => x,
        };
        self.output.forward(cx, y)
    }

    /// Per-frame CTC log-probabilities `[B, T', V]`; class 0 is the blank.
    pub fn ctc_log_probs<'t>(&self, cx: &Ctx<'t>, enc: &Encoded<'t>) -> Result<Var<'t>> {
        self.ctc.forward(cx, enc.output)?.log_softmax(2)
    }
}

/// Parameters added by the block ensembles: count with the configured
/// ensemble minus count with ensembles disabled.
pub fn ensemble_parameter_delta(config: &ModelConfig) -> Result<usize> {
    let with = Blockformer::declare(config.clone())?.count_parameters();
    let without = Blockformer::declare(ModelConfig {
        ensemble_mode: EnsembleMode::None,
        ..config.clone()
    })?
    .count_parameters();
    Ok(with - without)
}

/// Stacks variable-length `[T_i, D]` feature matrices into a zero-padded
/// `[B, T_max, D]` batch.
pub fn pad_features(feats: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = feats
        .first()
        .ok_or_else(|| Error::Invalid("empty feature batch".into()))?;
    let d = first.shape().get(1).copied().unwrap_or(0);
    let mut lengths = Vec::with_capacity(feats.len());
    for f in feats {
        if f.rank() != 2 || f.shape()[1] != d {
            return Err(Error::shape("pad_features", first.shape(), f.shape()));
        }
        lengths.push(f.shape()[0]);
    }
    let t = *lengths.iter().max().expect("non-empty");
    let mut data = vec![0.0; feats.len() * t * d];
    for (b, f) in feats.iter().enumerate() {
        data[b * t * d..b * t * d + f.numel()].copy_from_slice(f.data());
    }
    Ok((Tensor::new([feats.len(), t, d], data)?, lengths))
}
