mod common;

use blockformer::model::{
    base_wsbo, ensemble_parameter_delta, pad_features, se_excite, se_squeeze, se_wsbo, Blockformer,
    ConformerBlock, DecoderBlock, DecoderPosMode, EnsembleMode, ModelConfig,
};
use blockformer::nn::{causal_mask, key_padding_mask, subsampled_len, Ctx, RelPosSelfAttention, LAYER_NORM_EPS};
use blockformer::tensor::{check_param_gradients, ParamStore, Tape, Tensor, Var};
use common::{desk_layer_norm, input_grad_error, input_grad_error_with, random, weighted_sum, zero_params};
use proptest::prelude::*;

fn conformer(d: usize, heads: usize, seed: u64) -> (ParamStore, ConformerBlock) {
    let mut s = ParamStore::new();
    let block = ConformerBlock::new(&mut s, "blk", d, heads, 2 * d, 3).unwrap();
    s.materialize(seed);
    (s, block)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

#[test]
fn conformer_block_preserves_shape() {
    for (t, d, h) in [(1, 4, 1), (5, 8, 2), (9, 12, 3)] {
        let (s, block) = conformer(d, h, 1);
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &s);
        let y = block.forward(&cx, tape.constant(random(&[2, t, d], 3)), &[t, t]).unwrap();
        assert_eq!(y.shape(), vec![2, t, d]);
    }
}

#[test]
fn conformer_block_zero_parameters_is_four_layer_norms() {
    let (mut s, block) = conformer(8, 2, 1);
    zero_params(&mut s);
    let x = random(&[1, 5, 8], 11);
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &s);
    let y = block.forward(&cx, tape.constant(x.clone()), &[5]).unwrap().value();
    let mut expect = rows(&x);
    for _ in 0..4 {
        expect = desk_layer_norm(&expect, LAYER_NORM_EPS);
    }
    let got = rows(&y);
    for (g, e) in got.iter().zip(&expect) {
        for (a, b) in g.iter().zip(e) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn conformer_block_residual_structure_with_output_biases() {
    // With all weights zero, each sub-module emits only its output bias:
    // y = LN(LN(LN(LN(x + b1/2) + bo) + bc) + b2/2).
    let (mut s, block) = conformer(6, 2, 1);
    zero_params(&mut s);
    let b1 = random(&[6], 21);
    let bo = random(&[6], 22);
    let bc = random(&[6], 23);
    let b2 = random(&[6], 24);
    s.set_value(block.ffn1.linear2.bias.unwrap(), b1.clone()).unwrap();
    s.set_value(block.self_attn.out.bias.unwrap(), bo.clone()).unwrap();
    s.set_value(block.conv.pointwise2.bias.unwrap(), bc.clone()).unwrap();
    s.set_value(block.ffn2.linear2.bias.unwrap(), b2.clone()).unwrap();
    let x = random(&[1, 4, 6], 25);
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &s);
    let y = block.forward(&cx, tape.constant(x.clone()), &[4]).unwrap().value();

    let add = |m: &[Vec<f64>], b: &Tensor, k: f64| -> Vec<Vec<f64>> {
        m.iter()
            .map(|r| r.iter().zip(b.data()).map(|(x, b)| x + k * b).collect())
            .collect()
    };
    let ln = |m: Vec<Vec<f64>>| desk_layer_norm(&m, LAYER_NORM_EPS);
    let x1 = ln(add(&rows(&x), &b1, 0.5));
    let x2 = ln(add(&x1, &bo, 1.0));
    let x3 = ln(add(&x2, &bc, 1.0));
    let expect = ln(add(&x3, &b2, 0.5));
    for (g, e) in rows(&y).iter().zip(&expect) {
        for (a, b) in g.iter().zip(e) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn conformer_block_gradients() {
    let (s, block) = conformer(8, 2, 5);
    let x0 = random(&[2, 5, 8], 6);
    let lengths = [5, 4];
    let report = check_param_gradients(
        &s,
        |tape, params| {
            let cx = Ctx::eval(tape, params);
            let y = block.forward(&cx, tape.constant(x0.clone()), &lengths)?;
            Ok(weighted_sum(y, 7))
        },
        1e-5,
    )
    .unwrap();
    for r in &report {
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
    let err = input_grad_error_with(&s, &x0, |cx, x| weighted_sum(block.forward(cx, x, &lengths).unwrap(), 7));
    assert!(err < 1e-4, "input gradient error {err:e}");
}

#[test]
fn conformer_block_ignores_padding() {
    let (s, block) = conformer(8, 2, 2);
    let short = random(&[1, 4, 8], 31);
    let long = random(&[1, 7, 8], 32);
    let (batch, lengths) = pad_features(&[&short.reshape([4, 8]).unwrap(), &long.reshape([7, 8]).unwrap()]).unwrap();
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &s);
    let alone = block.forward(&cx, tape.constant(short), &[4]).unwrap().value();
    let padded = block.forward(&cx, tape.constant(batch), &lengths).unwrap().value();
    for i in 0..4 * 8 {
        assert!((alone.data()[i] - padded.data()[i]).abs() < 1e-12);
    }
}

fn decoder_block(pos: DecoderPosMode, seed: u64) -> (ParamStore, DecoderBlock) {
    let mut s = ParamStore::new();
    let block = DecoderBlock::new(&mut s, "dec", 8, 2, 16, pos).unwrap();
    s.materialize(seed);
    (s, block)
}

#[test]
fn decoder_block_is_causal() {
    for pos in [DecoderPosMode::Relative, DecoderPosMode::Absolute] {
        let (s, block) = decoder_block(pos, 3);
        let memory = random(&[1, 6, 8], 4);
        let x = random(&[1, 5, 8], 5);
        let run = |x: &Tensor| {
            let tape = Tape::new();
            let cx = Ctx::eval(&tape, &s);
            block
                .forward(&cx, tape.constant(x.clone()), &causal_mask(&[5], 5), tape.constant(memory.clone()), &key_padding_mask(&[6], 6))
                .unwrap()
                .value()
        };
        let base = run(&x);
        for j in 0..5 {
            let mut probe = x.clone();
            for k in 0..8 {
                probe.data_mut()[j * 8 + k] += 1.0;
            }
            let out = run(&probe);
            assert_eq!(&out.data()[..j * 8], &base.data()[..j * 8], "position {j} leaked");
            assert_ne!(&out.data()[j * 8..(j + 1) * 8], &base.data()[j * 8..(j + 1) * 8]);
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut s = ParamStore::new();
    let attn = RelPosSelfAttention::new(&mut s, "a", 8, 2).unwrap();
    s.materialize(1);
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &s);
    let (_, w) = attn
        .forward_with_weights(&cx, tape.constant(random(&[1, 1, 8], 2)), &causal_mask(&[1], 1))
        .unwrap();
    assert_eq!(w.value().data(), &[1.0, 1.0]);
}

#[test]
fn decoder_block_gradients() {
    let (s, block) = decoder_block(DecoderPosMode::Relative, 8);
    let x0 = random(&[2, 4, 8], 9);
    let memory = random(&[2, 5, 8], 10);
    let report = check_param_gradients(
        &s,
        |tape, params| {
            let cx = Ctx::eval(tape, params);
            let y = block.forward(
                &cx,
                tape.constant(x0.clone()),
                &causal_mask(&[4, 3], 4),
                tape.constant(memory.clone()),
                &key_padding_mask(&[5, 3], 5),
            )?;
            Ok(weighted_sum(y, 11))
        },
        1e-5,
    )
    .unwrap();
    for r in &report {
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

fn consts<'t>(tape: &'t Tape, ts: &[Tensor]) -> Vec<Var<'t>> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

#[test]
fn base_wsbo_examples() {
    let tape = Tape::new();
    let y = random(&[2, 3, 4], 1);
    let out = base_wsbo(tape.constant(Tensor::ones([1])), false, &consts(&tape, &[y.clone()])).unwrap();
    assert_eq!(out.value(), y);

    let ys = [random(&[1, 2, 3], 2), random(&[1, 2, 3], 3), random(&[1, 2, 3], 4)];
    let out = base_wsbo(tape.constant(Tensor::full([3], 0.7)), true, &consts(&tape, &ys)).unwrap();
    for i in 0..6 {
        let mean = (ys[0].data()[i] + ys[1].data()[i] + ys[2].data()[i]) / 3.0;
        assert!((out.value().data()[i] - mean).abs() < 1e-15);
    }

    let alpha = Tensor::new([2], vec![0.5, 2.0]).unwrap();
    let ys = [Tensor::ones([2, 2, 2]), Tensor::full([2, 2, 2], 2.0)];
    let out = base_wsbo(tape.constant(alpha), false, &consts(&tape, &ys)).unwrap();
    assert!(out.value().data().iter().all(|&v| v == 4.5));
}

#[test]
fn ensemble_input_errors() {
    let tape = Tape::new();
    assert!(base_wsbo(tape.constant(Tensor::ones([1])), false, &[]).is_err());
    let ys = consts(&tape, &[Tensor::ones([1, 2, 2]), Tensor::ones([1, 3, 2])]);
    assert!(base_wsbo(tape.constant(Tensor::ones([2])), false, &ys).is_err());
    assert!(base_wsbo(tape.constant(Tensor::ones([3])), false, &ys[..1]).is_err());
    assert!(se_squeeze(&[], None).is_err());
    let w = tape.constant(Tensor::ones([2, 2]));
    assert!(se_excite(w, w, tape.constant(Tensor::ones([1, 3]))).is_err());
}

#[test]
fn se_squeeze_examples() {
    let tape = Tape::new();
    let z = se_squeeze(&consts(&tape, &[Tensor::ones([1, 3, 4])]), None).unwrap();
    assert_eq!(z.value().data(), &[1.0]);
    let y = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let z = se_squeeze(&consts(&tape, &[y]), None).unwrap();
    assert_eq!(z.value().data(), &[2.5]);
}

#[test]
fn se_squeeze_excludes_padding() {
    let tape = Tape::new();
    let a = random(&[3, 4], 1);
    let b = random(&[5, 4], 2);
    let (padded, lengths) = pad_features(&[&a, &b]).unwrap();
    let alone = se_squeeze(&consts(&tape, &[a.reshape([1, 3, 4]).unwrap()]), None).unwrap();
    let mut garbage = padded.clone();
    for t in 3..5 {
        for d in 0..4 {
            garbage.data_mut()[t * 4 + d] = 100.0;
        }
    }
    let batch = se_squeeze(&consts(&tape, &[garbage]), Some(&lengths)).unwrap();
    assert!((batch.value().data()[0] - alone.value().data()[0]).abs() < 1e-15);
}

#[test]
fn se_excite_examples() {
    let tape = Tape::new();
    let zero = tape.constant(Tensor::zeros([3, 3]));
    let s = se_excite(zero, zero, tape.constant(random(&[2, 3], 1))).unwrap();
    assert!(s.value().data().iter().all(|&v| v == 0.5));
    let one = tape.constant(Tensor::ones([1, 1]));
    let s = se_excite(one, one, tape.constant(Tensor::zeros([1, 1]))).unwrap();
    assert_eq!(s.value().data(), &[0.5]);
}

#[test]
fn se_excite_gradients() {
    // Away from the relu kink: W1 z has entries bounded away from zero.
    let z = Tensor::new([1, 3], vec![0.9, -0.4, 0.3]).unwrap();
    let w1 = Tensor::new([3, 3], vec![1.0, 0.5, 0.2, -0.8, 0.1, 0.4, 0.3, 0.3, -1.0]).unwrap();
    let w2 = random(&[3, 3], 4);
    let err = input_grad_error(&w1, |w| {
        let t = w.tape();
        weighted_sum(se_excite(w, t.constant(w2.clone()), t.constant(z.clone())).unwrap(), 5)
    });
    assert!(err < 1e-6, "W1 {err:e}");
    let err = input_grad_error(&w2, |w| {
        let t = w.tape();
        weighted_sum(se_excite(t.constant(w1.clone()), w, t.constant(z.clone())).unwrap(), 5)
    });
    assert!(err < 1e-6, "W2 {err:e}");
    let err = input_grad_error(&z, |z| {
        let t = z.tape();
        weighted_sum(se_excite(t.constant(w1.clone()), t.constant(w2.clone()), z).unwrap(), 5)
    });
    assert!(err < 1e-6, "z {err:e}");
}

#[test]
fn se_wsbo_examples() {
    let tape = Tape::new();
    let ys = [random(&[2, 3, 4], 1), random(&[2, 3, 4], 2)];
    let zero = tape.constant(Tensor::zeros([2, 2]));
    let out = se_wsbo(zero, zero, &consts(&tape, &ys), None).unwrap();
    for i in 0..24 {
        let expect = 0.5 * (ys[0].data()[i] + ys[1].data()[i]);
        assert!((out.value().data()[i] - expect).abs() < 1e-12);
    }
    let y = random(&[1, 4, 3], 3);
    let w = tape.constant(Tensor::full([1, 1], 0.8));
    let out = se_wsbo(w, w, &consts(&tape, &[y.clone()]), None).unwrap();
    assert!(out.value().l2_norm() < y.l2_norm());
}

#[test]
fn se_wsbo_gradients() {
    let ys: Vec<Tensor> = (0..3).map(|c| random(&[2, 4, 3], 10 + c).map(|v| v + 0.3 * c as f64)).collect();
    let w1 = random(&[3, 3], 20);
    let w2 = random(&[3, 3], 21);
    let lengths = [4, 3];
    let tape = Tape::new();
    let vars: Vec<Var> = ys.iter().map(|y| tape.var(y.clone())).collect();
    let (a, b) = (tape.var(w1.clone()), tape.var(w2.clone()));
    se_wsbo(a, b, &vars, Some(&lengths)).unwrap();
    assert!(tape.relu_margin() > 1e-3, "test point too close to the relu kink");

    for k in 0..5 {
        let x0 = match k {
            0..=2 => ys[k].clone(),
            3 => w1.clone(),
            _ => w2.clone(),
        };
        let err = input_grad_error(&x0, |x| {
            let t = x.tape();
            let mut inputs: Vec<Var> = ys.iter().map(|y| t.constant(y.clone())).collect();
            let (mut a, mut b) = (t.constant(w1.clone()), t.constant(w2.clone()));
            match k {
                0..=2 => inputs[k] = x,
                3 => a = x,
                _ => b = x,
            }
            weighted_sum(se_wsbo(a, b, &inputs, Some(&lengths)).unwrap(), 30)
        });
        assert!(err < 1e-4, "input {k}: {err:e}");
    }
}

#[test]
fn every_ensemble_input_receives_gradient() {
    let ys: Vec<Tensor> = (0..4).map(|c| random(&[1, 3, 5], 40 + c)).collect();
    let tape = Tape::new();
    let vars: Vec<Var> = ys.iter().map(|y| tape.var(y.clone())).collect();
    let out = se_wsbo(tape.constant(random(&[2, 4], 1)), tape.constant(random(&[4, 2], 2)), &vars, None).unwrap();
    let g = tape.backward(weighted_sum(out, 3)).unwrap();
    for v in &vars {
        assert!(g.wrt(*v).l2_norm() > 0.0);
    }
    let tape = Tape::new();
    let vars: Vec<Var> = ys.iter().map(|y| tape.var(y.clone())).collect();
    let out = base_wsbo(tape.constant(Tensor::zeros([4])), true, &vars).unwrap();
    let g = tape.backward(weighted_sum(out, 3)).unwrap();
    for v in &vars {
        assert!(g.wrt(*v).l2_norm() > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_weights_sum_to_one(alpha in proptest::collection::vec(-20.0f64..20.0, 1..13)) {
        let c = alpha.len();
        let tape = Tape::new();
        let ys: Vec<Var> = (0..c).map(|_| tape.constant(Tensor::ones([1, 1, 1]))).collect();
        let out = base_wsbo(tape.constant(Tensor::new([c], alpha).unwrap()), true, &ys).unwrap();
        prop_assert!((out.value().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raw_weighting_is_positively_homogeneous(seed in 0u64..1000, t in 0.01f64..50.0) {
        let tape = Tape::new();
        let alpha = tape.constant(random(&[3], seed));
        let ys: Vec<Tensor> = (0..3).map(|c| random(&[1, 2, 3], seed + 1 + c)).collect();
        let scaled: Vec<Tensor> = ys.iter().map(|y| y.map(|v| v * t)).collect();
        let a = base_wsbo(alpha, false, &consts(&tape, &ys)).unwrap().value();
        let b = base_wsbo(alpha, false, &consts(&tape, &scaled)).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x * t - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn se_gates_strictly_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..10.0) {
        // sigmoid(x) rounds to exactly 1.0 in f64 once x exceeds about 36.7
        let tape = Tape::new();
        let w1 = tape.constant(random(&[4, 4], seed).map(|v| v * scale));
        let w2 = tape.constant(random(&[4, 4], seed + 1).map(|v| v * scale));
        let z = tape.constant(random(&[3, 4], seed + 2));
        let s = se_excite(w1, w2, z).unwrap().value();
        let logits = z.matmul(w1.transpose().unwrap()).unwrap().relu().matmul(w2.transpose().unwrap()).unwrap().value();
        for (&g, &x) in s.data().iter().zip(logits.data()) {
            prop_assert!(g > 0.0 && g <= 1.0);
            if x < 36.0 {
                prop_assert!(g < 1.0);
            }
        }
    }
}

fn toy(mode: EnsembleMode) -> ModelConfig {
    ModelConfig::toy(10, 16, mode)
}

/// Subsampler, conformer stack and decoder stack composed by hand with
/// no ensemble.
fn plain_forward(model: &Blockformer, feats: &Tensor, lengths: &[usize], inputs: &[Vec<usize>]) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &model.params);
    let (mut x, lens) = model.subsample.forward(&cx, tape.constant(feats.clone()), lengths).unwrap();
    for block in &model.encoder {
        x = block.forward(&cx, x, &lens).unwrap();
    }
    let enc = x.value();
    let l = inputs[0].len();
    let ids: Vec<usize> = inputs.iter().flatten().copied().collect();
    let mut y = model.embed.forward(&cx, &ids, &[inputs.len(), l]).unwrap();
    let self_mask = causal_mask(&vec![l; inputs.len()], l);
    let mem_mask = key_padding_mask(&lens, enc.shape()[1]);
    for block in &model.decoder {
        y = block.forward(&cx, y, &self_mask, x, &mem_mask).unwrap();
    }
    (enc, model.output.forward(&cx, y).unwrap().value())
}

#[test]
fn mode_none_is_bit_identical_to_plain_stacks() {
    let feats = random(&[2, 20, 16], 1);
    let lengths = [20, 15];
    let inputs = vec![vec![8, 1, 2, 3], vec![8, 4, 5, 6]];
    let plain_source = Blockformer::new(toy(EnsembleMode::Se), 3).unwrap();
    let (enc_ref, logits_ref) = plain_forward(&plain_source, &feats, &lengths, &inputs);

    let model = Blockformer::new(toy(EnsembleMode::None), 3).unwrap();
    assert_eq!(model.participating_blocks(), (0, 0));
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &model.params);
    let enc = model.encode(&cx, tape.constant(feats), &lengths).unwrap();
    assert_eq!(enc.ensemble_inputs, 0);
    assert_eq!(enc.output.value(), enc_ref);
    let logits = model.decode_forward(&cx, &enc, &inputs).unwrap().value();
    assert_eq!(logits, logits_ref);
}

#[test]
fn encoder_output_length_follows_subsampling() {
    let model = Blockformer::new(toy(EnsembleMode::Base), 1).unwrap();
    for (t, extra) in [(7, 0), (16, 3), (31, 0)] {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &model.params);
        let enc = model.encode(&cx, tape.constant(random(&[1, t + extra, 16], t as u64)), &[t]).unwrap();
        assert_eq!(enc.lengths, vec![subsampled_len(t).unwrap()]);
        assert_eq!(enc.output.shape()[1], subsampled_len(t + extra).unwrap());
    }
}

#[test]
fn suffix_ensemble_consumes_requested_blocks() {
    let config = ModelConfig {
        num_encoder_blocks: 12,
        num_decoder_blocks: 6,
        d_model: 8,
        d_ffn: 8,
        ..toy(EnsembleMode::Se)
    }
    .with_ablation("E5D5")
    .unwrap();
    let model = Blockformer::new(config, 1).unwrap();
    assert_eq!(model.participating_blocks(), (5, 5));
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &model.params);
    let enc = model.encode(&cx, tape.constant(random(&[1, 12, 16], 2)), &[12]).unwrap();
    assert_eq!(enc.ensemble_inputs, 5);
}

#[test]
fn decoder_logits_are_causal() {
    let model = Blockformer::new(toy(EnsembleMode::Se), 2).unwrap();
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &model.params);
    let enc = model.encode(&cx, tape.constant(random(&[1, 20, 16], 3)), &[20]).unwrap();
    let a = model.decode_forward(&cx, &enc, &[vec![8, 1, 2, 3, 4]]).unwrap().value();
    let b = model.decode_forward(&cx, &enc, &[vec![8, 1, 7, 6, 5]]).unwrap().value();
    assert_eq!(&a.data()[..2 * 10], &b.data()[..2 * 10]);
    assert_ne!(&a.data()[2 * 10..3 * 10], &b.data()[2 * 10..3 * 10]);
}

#[test]
fn decoder_input_errors() {
    let model = Blockformer::new(toy(EnsembleMode::Base), 2).unwrap();
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &model.params);
    let enc = model.encode(&cx, tape.constant(random(&[1, 12, 16], 3)), &[12]).unwrap();
    assert!(model.decode_forward(&cx, &enc, &[vec![8, 10]]).is_err());
    assert!(model.decode_forward(&cx, &enc, &[vec![1, 2]]).is_err());
    assert!(model.decode_forward(&cx, &enc, &[]).is_err());
}

#[test]
fn ctc_head_is_normalized_and_uniform_at_zero() {
    let mut model = Blockformer::new(toy(EnsembleMode::Se), 4).unwrap();
    let run = |model: &Blockformer| {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, &model.params);
        let enc = model.encode(&cx, tape.constant(random(&[2, 20, 16], 5)), &[20, 14]).unwrap();
        model.ctc_log_probs(&cx, &enc).unwrap().value()
    };
    let lp = run(&model);
    for frame in lp.data().chunks(10) {
        let total: f64 = frame.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    for id in [model.ctc.weight, model.ctc.bias.unwrap()] {
        let shape = model.params.shape(id).to_vec();
        model.params.set_value(id, Tensor::zeros(shape)).unwrap();
    }
    let lp = run(&model);
    assert!(lp.data().iter().all(|v| (v + 10f64.ln()).abs() < 1e-12));
}

#[test]
fn ctc_head_gradients() {
    let model = Blockformer::new(toy(EnsembleMode::Se), 6).unwrap();
    let enc0 = random(&[1, 3, 16], 7);
    let mut head = ParamStore::new();
    let w = head.declare("w", &[10, 16], blockformer::tensor::Init::Zeros);
    head.materialize(0);
    head.set_value(w, model.params.value(model.ctc.weight).clone()).unwrap();
    let report = check_param_gradients(
        &head,
        |tape, params| {
            let x = tape.constant(enc0.clone()).matmul(tape.param(params, w).transpose()?)?;
            Ok(weighted_sum(x.log_softmax(2)?, 8))
        },
        1e-5,
    )
    .unwrap();
    assert!(report[0].max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn ensemble_deltas_and_parameter_paths() {
    let full = ModelConfig::full(EnsembleMode::Base);
    assert_eq!(ensemble_parameter_delta(&full).unwrap(), 18);
    assert_eq!(ensemble_parameter_delta(&ModelConfig::full(EnsembleMode::BaseSoftmax)).unwrap(), 18);
    assert_eq!(ensemble_parameter_delta(&ModelConfig::full(EnsembleMode::Se)).unwrap(), 360);
    assert_eq!(ensemble_parameter_delta(&ModelConfig::full(EnsembleMode::None)).unwrap(), 0);
    let e5d5 = ModelConfig::full(EnsembleMode::Se).with_ablation("E5D5").unwrap();
    assert_eq!(ensemble_parameter_delta(&e5d5).unwrap(), 2 * 25 + 2 * 25);

    let model = Blockformer::declare(ModelConfig::full(EnsembleMode::Se)).unwrap();
    for name in ["encoder.block3.ffn1.linear1.weight", "encoder.ensemble.W1", "decoder.ensemble.W2", "ctc.proj.weight"] {
        assert!(model.params.find(name).is_some(), "{name}");
    }
}

#[test]
fn backbone_initialization_shared_across_modes() {
    let se = Blockformer::new(toy(EnsembleMode::Se), 9).unwrap();
    let none = Blockformer::new(toy(EnsembleMode::None), 9).unwrap();
    for (name, value) in none.params.named_values() {
        assert_eq!(se.params.value(se.params.find(&name).unwrap()), &value, "{name}");
    }
}

#[test]
fn every_participating_block_feeds_the_loss_directly() {
    let model = Blockformer::new(toy(EnsembleMode::Base), 10).unwrap();
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, &model.params);
    let enc = model.encode(&cx, tape.constant(random(&[1, 16, 16], 11)), &[16]).unwrap();
    let lp = model.ctc_log_probs(&cx, &enc).unwrap();
    let logits = model.decode_forward(&cx, &enc, &[vec![8, 1, 2]]).unwrap();
    let loss = weighted_sum(lp, 12).add(weighted_sum(logits, 13)).unwrap();
    let mut store = model.params.clone();
    store.zero_grad();
    tape.backward(loss).unwrap().accumulate_into(&mut store);
    for name in ["encoder.ensemble.alpha", "decoder.ensemble.alpha"] {
        let g = store.grad(store.find(name).unwrap());
        assert!(g.iter().all(|&v| v != 0.0), "{name}: {g:?}");
    }
}
