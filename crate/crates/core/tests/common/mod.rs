#![allow(dead_code)]

use blockformer::tensor::{finite_diff_gradient, max_relative_error, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Zeroes every parameter, then resets layer-norm gains to one.
pub fn zero_params(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let fill = if store.name(id).ends_with(".gamma") { 1.0 } else { 0.0 };
        let shape = store.shape(id).to_vec();
        store.set_value(id, Tensor::full(shape, fill)).unwrap();
    }
}

/// Relative error between the tape gradient of `loss` at `x0` and central
/// differences.
pub fn input_grad_error(x0: &Tensor, loss: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let x = tape.var(x0.clone());
    let analytic = tape.backward(loss(x)).unwrap().wrt(x);
    let numeric = finite_diff_gradient(
        |p| {
            let tape = Tape::new();
            loss(tape.constant(p.clone())).value().item()
        },
        x0,
        1e-5,
    )
    .unwrap();
    max_relative_error(&analytic, &numeric)
}

/// `sum(w ⊙ y)` for a fixed random `w`, so every element of `y` matters.
pub fn weighted_sum<'t>(y: Var<'t>, seed: u64) -> Var<'t> {
    let w = random(&y.shape(), seed);
    y.mul(y.tape().constant(w)).unwrap().sum_all()
}

/// Row-wise layer norm with unit gain and zero shift.
pub fn desk_layer_norm(rows: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            r.iter().map(|x| (x - mean) / (var + eps).sqrt()).collect()
        })
        .collect()
}

/// [`input_grad_error`] for a loss that also reads parameters.
pub fn input_grad_error_with(
    store: &ParamStore,
    x0: &Tensor,
    loss: impl for<'t> Fn(&blockformer::nn::Ctx<'t>, Var<'t>) -> Var<'t>,
) -> f64 {
    use blockformer::nn::Ctx;
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, store);
    let x = tape.var(x0.clone());
    let analytic = tape.backward(loss(&cx, x)).unwrap().wrt(x);
    let numeric = finite_diff_gradient(
        |p| {
            let tape = Tape::new();
            let cx = Ctx::eval(&tape, store);
            loss(&cx, tape.constant(p.clone())).value().item()
        },
        x0,
        1e-5,
    )
    .unwrap();
    max_relative_error(&analytic, &numeric)
}

/// Row-wise log-softmax of random logits in `[-scale, scale]`.
pub fn random_log_probs(t: usize, v: usize, scale: f64, seed: u64) -> Tensor {
    let logits = random(&[t, v], seed);
    let mut out = Vec::with_capacity(t * v);
    for row in logits.data().chunks(v) {
        let row: Vec<f64> = row.iter().map(|x| x * scale).collect();
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new([t, v], out).unwrap()
}

/// CTC collapse: merge repeats, then drop blanks (class 0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Calls `f(path, log_prob)` for every one of the `V^T` frame paths.
pub fn for_each_path(lp: &Tensor, mut f: impl FnMut(&[usize], f64)) {
    let (t, v) = (lp.shape()[0], lp.shape()[1]);
    let mut path = vec![0usize; t];
    loop {
        let score: f64 = path.iter().enumerate().map(|(i, &c)| lp.at(&[i, c])).sum();
        f(&path, score);
        let mut i = t;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Probability of `labels` summed over every path that collapses to it.
pub fn ctc_brute_force_prob(lp: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for_each_path(lp, |path, score| {
        if collapse(path) == labels {
            total += score.exp();
        }
    });
    total
}

/// Every label sequence reachable from some path, with its total probability.
pub fn ctc_all_label_probs(lp: &Tensor) -> std::collections::BTreeMap<Vec<usize>, f64> {
    let mut probs = std::collections::BTreeMap::new();
    for_each_path(lp, |path, score| {
        *probs.entry(collapse(path)).or_insert(0.0) += score.exp();
    });
    probs
}
