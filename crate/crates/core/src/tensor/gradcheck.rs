use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]; below this magnitude both
/// gradients are treated as zero and the error is effectively absolute.
pub const GRAD_REL_FLOOR: f64 = 1e-5;

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_diff_gradient(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// `|a - b| / max(|a|, |b|, GRAD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest elementwise [`relative_error`] between two same-shape tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Worst agreement between analytic and numeric gradients for one
/// parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares the tape gradient of a scalar `loss` with central differences
/// for every element of every parameter in `store`. The loss must be a
/// deterministic function of the parameter values it is handed.
pub fn check_param_gradients<F>(store: &ParamStore, loss: F, h: f64) -> Result<Vec<ParamGradCheck>>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let tape = Tape::new();
        let root = loss(&tape, store)?;
        tape.backward(root)?.accumulate_into(&mut analytic);
    }
    let eval = |probe: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(loss(&tape, probe)?.value().item())
    };
    let mut probe = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.value(id).numel();
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.grad(id)[i];
            rel = rel.max(relative_error(a, numeric));
            abs = abs.max((a - numeric).abs());
        }
        report.push(ParamGradCheck {
            name: store.name(id).to_string(),
            numel: n,
            max_rel_err: rel,
            max_abs_err: abs,
        });
    }
    Ok(report)
}
