use std::sync::Arc;

use blockformer::tensor::{finite_diff_gradient, max_relative_error, Mask, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Checks d(sum(w * f(x)))/dx against central differences, with a fixed
/// random weighting `w` so every output element matters.
fn check_unary(shape: &[usize], seed: u64, tol: f64, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
    let x0 = random(shape, seed);
    let out_shape = {
        let tape = Tape::new();
        f(tape.constant(x0.clone())).shape()
    };
    let w = random(&out_shape, seed + 1000);
    let loss = |x: &Tensor| {
        let tape = Tape::new();
        let y = f(tape.constant(x.clone()));
        y.mul(tape.constant(w.clone())).unwrap().sum_all().value().item()
    };
    let tape = Tape::new();
    let x = tape.var(x0.clone());
    let l = f(x).mul(tape.constant(w.clone())).unwrap().sum_all();
    let analytic = tape.backward(l).unwrap().wrt(x);
    let numeric = finite_diff_gradient(loss, &x0, 1e-5).unwrap();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < tol, "relative error {err:e} >= {tol:e}");
}

fn check_binary(
    sa: &[usize],
    sb: &[usize],
    seed: u64,
    f: impl for<'t> Fn(Var<'t>, Var<'t>) -> Var<'t> + Copy,
) {
    let b0 = random(sb, seed + 7);
    check_unary(sa, seed, 1e-6, |a| {
        let b = a.tape().constant(b0.clone());
        f(a, b)
    });
    let a0 = random(sa, seed + 9);
    check_unary(sb, seed, 1e-6, |b| {
        let a = b.tape().constant(a0.clone());
        f(a, b)
    });
}

#[test]
fn matmul_identity_and_hand_product() {
    let tape = Tape::new();
    let a = random(&[3, 3], 1);
    let out = tape
        .constant(Tensor::eye(3))
        .matmul(tape.constant(a.clone()))
        .unwrap();
    assert_eq!(out.value(), a);
    let lhs = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let rhs = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
    assert_eq!(lhs.matmul(rhs).unwrap().value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let err = tape
        .constant(Tensor::zeros([2, 3]))
        .matmul(tape.constant(Tensor::zeros([2, 3])))
        .unwrap_err()
        .to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradients() {
    check_binary(&[4, 5], &[5, 3], 11, |a, b| a.matmul(b).unwrap());
    // batched lhs against a shared rhs
    check_binary(&[2, 3, 4, 5], &[5, 2], 12, |a, b| a.matmul(b).unwrap());
    check_binary(&[2, 1, 4, 5], &[3, 5, 2], 13, |a, b| a.matmul(b).unwrap());
}

#[test]
fn elementwise_gradients_with_broadcast() {
    check_binary(&[3, 4], &[3, 4], 21, |a, b| a.add(b).unwrap());
    check_binary(&[3, 4], &[4], 22, |a, b| a.sub(b).unwrap());
    check_binary(&[2, 3, 4], &[2, 1, 1], 23, |a, b| a.mul(b).unwrap());
    check_unary(&[3, 4], 24, 1e-6, |a| a.scale(0.5).add_scalar(2.0));
}

#[test]
fn elementwise_trivia() {
    let tape = Tape::new();
    let a = random(&[2, 3], 3);
    let sum = tape
        .constant(a.clone())
        .add(tape.constant(Tensor::zeros([2, 3])))
        .unwrap();
    assert_eq!(sum.value(), a);
    let b = random(&[2, 3], 4);
    let x = tape.var(a.clone());
    let prod = x.mul(tape.constant(b.clone())).unwrap().sum_all();
    assert_eq!(tape.backward(prod).unwrap().wrt(x), b);
    assert!(tape
        .constant(Tensor::zeros([2, 3]))
        .add(tape.constant(Tensor::zeros([2])))
        .is_err());
}

#[test]
fn reductions() {
    let tape = Tape::new();
    let ones = tape.var(Tensor::ones([4, 5]));
    assert_eq!(ones.mean(&[0, 1], false).unwrap().value().item(), 1.0);
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    assert_eq!(m.mean(&[0, 1], false).unwrap().value().item(), 2.5);
    assert_eq!(m.max(&[1], false).unwrap().value().data(), &[2.0, 4.0]);
    assert_eq!(m.sum(&[0], true).unwrap().value().shape(), &[1, 2]);
    assert!(m.sum(&[2], false).is_err());

    let mean = ones.mean(&[0, 1], false).unwrap();
    let g = tape.backward(mean).unwrap().wrt(ones);
    assert!(g.data().iter().all(|&v| (v - 1.0 / 20.0).abs() < 1e-15));

    check_unary(&[3, 4, 2], 31, 1e-6, |a| a.sum(&[1], false).unwrap());
    check_unary(&[3, 4, 2], 32, 1e-6, |a| a.mean(&[0, 2], true).unwrap());
    check_unary(&[3, 4], 33, 1e-6, |a| a.max(&[1], false).unwrap());
}

#[test]
fn activations() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::from_rows(&[vec![0.0, -3.0]]));
    assert_eq!(z.sigmoid().value().data()[0], 0.5);
    assert_eq!(z.relu().value().data(), &[0.0, 0.0]);
    let x = tape.var(Tensor::scalar(0.0));
    let g = tape.backward(x.relu()).unwrap().wrt(x);
    assert_eq!(g.item(), 0.0, "relu subgradient at 0 is 0");

    check_unary(&[3, 4], 41, 1e-6, |a| a.swish());
    check_unary(&[3, 4], 42, 1e-6, |a| a.sigmoid());
    check_unary(&[3, 4], 43, 1e-6, |a| a.tanh());
    check_unary(&[3, 4], 44, 1e-6, |a| a.relu());
    check_unary(&[3, 4], 45, 1e-6, |a| a.exp());
    check_unary(&[3, 4], 46, 1e-6, |a| a.add_scalar(2.0).ln());
}

#[test]
fn sigmoid_sum_matches_closed_form() {
    let x0 = random(&[6], 5);
    let numeric =
        finite_diff_gradient(|x| x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).sum(), &x0, 1e-5)
            .unwrap();
    for (i, &v) in x0.data().iter().enumerate() {
        let s = 1.0 / (1.0 + (-v).exp());
        assert!((numeric.data()[i] - s * (1.0 - s)).abs() < 1e-9);
    }
}

#[test]
fn softmax_basics() {
    let tape = Tape::new();
    let s = tape.constant(Tensor::zeros([3])).softmax(0).unwrap().value();
    assert!(s.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    let v = random(&[5], 8);
    let a = tape.constant(v.clone()).softmax(0).unwrap().value();
    let b = tape.constant(v.map(|x| x + 123.0)).softmax(0).unwrap().value();
    assert!(a.max_abs_diff(&b) < 1e-12);

    check_unary(&[3, 5], 51, 1e-6, |a| a.softmax(1).unwrap());
    check_unary(&[3, 5, 2], 52, 1e-6, |a| a.softmax(1).unwrap());
    check_unary(&[3, 5], 53, 1e-6, |a| a.log_softmax(1).unwrap());
}

#[test]
fn backward_contracts() {
    let tape = Tape::new();
    let a = tape.var(random(&[2, 3], 1));
    let unused = tape.var(random(&[4], 2));
    let grads = tape.backward(a.sum_all()).unwrap();
    assert!(grads.wrt(a).data().iter().all(|&g| g == 1.0));
    assert!(grads.wrt(unused).data().iter().all(|&g| g == 0.0));
    assert!(tape.backward(a).is_err(), "non-scalar root");
}

#[test]
fn backward_is_linear_over_independent_subgraphs() {
    let x0 = random(&[3, 3], 3);
    let run = |which: u8| {
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let f = x.tanh().sum_all();
        let g = x.matmul(x).unwrap().sum_all();
        let root = match which {
            0 => f,
            1 => g,
            _ => f.add(g).unwrap(),
        };
        tape.backward(root).unwrap().wrt(x)
    };
    let (f, g, both) = (run(0), run(1), run(2));
    for i in 0..9 {
        assert!((f.data()[i] + g.data()[i] - both.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn structural_op_gradients() {
    check_unary(&[2, 3, 4], 61, 1e-6, |a| a.permute(&[2, 0, 1]).unwrap());
    check_unary(&[2, 3, 4], 62, 1e-6, |a| a.reshape(&[6, 4]).unwrap().transpose().unwrap());
    check_unary(&[2, 5, 3], 63, 1e-6, |a| a.narrow(1, 1, 3).unwrap());
    check_unary(&[2, 3], 64, 1e-6, |a| {
        let t = a.tape();
        t.concat(&[a, a.scale(2.0), a.narrow(1, 0, 1).unwrap()], 1).unwrap()
    });
    let index = Arc::new(vec![Some(0), None, Some(5), Some(0)]);
    check_unary(&[2, 3], 65, 1e-6, move |a| a.gather(index.clone(), -7.0, &[2, 2]).unwrap());
    let mask = Mask::new([1, 3], vec![true, false, true]).unwrap();
    check_unary(&[2, 3], 66, 1e-6, move |a| a.masked_fill(&mask, -1e30).unwrap().tanh());
    check_unary(&[3, 4], 67, 1e-6, |a| a.normalize_last(1e-12));
}

#[test]
fn log_add_exp_values_and_gradients() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![0.0, -1e30, 2.0]]));
    let b = tape.constant(Tensor::from_rows(&[vec![0.0, -1e30, -1e30]]));
    let y = a.log_add_exp(b).unwrap().value();
    assert!((y.data()[0] - 2f64.ln()).abs() < 1e-15);
    assert!(y.data()[1] < -1e29 && y.data()[1].is_finite());
    assert_eq!(y.data()[2], 2.0);
    check_binary(&[3, 4], &[3, 4], 71, |a, b| a.log_add_exp(b).unwrap());
}

#[test]
fn convolutions() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new([1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let ones = tape.constant(Tensor::ones([1, 3]));
    assert_eq!(x.depthwise_conv1d(ones).unwrap().value().data(), &[3.0, 6.0, 5.0]);
    let delta = tape.constant(Tensor::new([1, 3], vec![0.0, 1.0, 0.0]).unwrap());
    assert_eq!(x.depthwise_conv1d(delta).unwrap().value(), x.value());
    assert!(x.depthwise_conv1d(tape.constant(Tensor::ones([1, 2]))).is_err());

    let w0 = random(&[2, 5], 81);
    check_unary(&[2, 6, 2], 82, 1e-6, |a| {
        a.depthwise_conv1d(a.tape().constant(w0.clone())).unwrap()
    });
    let x0 = random(&[2, 6, 2], 83);
    check_unary(&[2, 5], 84, 1e-6, |w| {
        w.tape().constant(x0.clone()).depthwise_conv1d(w).unwrap()
    });

    let k0 = random(&[3, 2, 3, 3], 85);
    check_unary(&[2, 2, 9, 8], 86, 1e-6, |a| {
        a.conv2d(a.tape().constant(k0.clone()), 2).unwrap()
    });
    let img = random(&[2, 2, 9, 8], 87);
    check_unary(&[3, 2, 3, 3], 88, 1e-6, |w| {
        w.tape().constant(img.clone()).conv2d(w, 2).unwrap()
    });
}

#[test]
fn finite_difference_oracle_agrees_with_matmul_backward() {
    let b0 = random(&[3, 2], 91);
    let x0 = random(&[2, 3], 92);
    let f = |x: &Tensor| {
        let t = Tape::new();
        t.constant(x.clone())
            .matmul(t.constant(b0.clone()))
            .unwrap()
            .sum_all()
            .value()
            .item()
    };
    let numeric = finite_diff_gradient(f, &x0, 1e-5).unwrap();
    let tape = Tape::new();
    let x = tape.var(x0);
    let l = x.matmul(tape.constant(b0)).unwrap().sum_all();
    assert!(max_relative_error(&tape.backward(l).unwrap().wrt(x), &numeric) < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_probability_vectors(
        v in proptest::collection::vec(-30.0f64..30.0, 1..12)
    ) {
        let n = v.len();
        let tape = Tape::new();
        let p = tape.constant(Tensor::new([n], v).unwrap()).softmax(0).unwrap().value();
        prop_assert!(p.data().iter().all(|&x| x >= 0.0));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn forward_ops_stay_finite(seed in 0u64..1000) {
        let tape = Tape::new();
        let x = tape.constant(random(&[3, 4], seed).map(|v| v * 50.0));
        let y = x.swish().add(x.sigmoid()).unwrap().log_softmax(1).unwrap().tanh();
        prop_assert!(y.value().is_finite());
    }
}
