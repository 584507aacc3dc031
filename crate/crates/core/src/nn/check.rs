//! Central finite-difference gradient verification.

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Denominator floor for relative errors so that gradients which are zero
/// analytically are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Worst relative error between back-propagated and central-difference
/// gradients of `f` with respect to each input tensor.
pub fn max_input_grad_error(inputs: &[Tensor], step: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (mut tape, vars, out) = eval(inputs);
    tape.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(&x.shape)))
        .collect();
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data[i];
            xs[k].data[i] = orig + step;
            let (t, _, o) = eval(&xs);
            let plus = t.value(o).item();
            xs[k].data[i] = orig - step;
            let (t, _, o) = eval(&xs);
            let minus = t.value(o).item();
            xs[k].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[k].data[i], numeric));
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences for every element of every parameter whose name starts with
/// `prefix`. The store should use `DType::F64`.
pub fn check_param_grads(
    store: &ParameterStore,
    prefix: &str,
    step: f64,
    f: impl Fn(&mut Tape, &ParameterStore) -> Var,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    tape.backward(out);
    let grads = tape.param_grads();
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect();
    for name in names {
        let base = store.get(&name).expect("listed").data.clone();
        for i in 0..base.len() {
            let mut probe = |delta: f64| {
                let mut d = base.clone();
                d[i] += delta;
                work.set(&name, &d).expect("same length");
                let mut t = Tape::new();
                let o = f(&mut t, &work);
                t.value(o).item()
            };
            let numeric = (probe(step) - probe(-step)) / (2.0 * step);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data[i]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
        work.set(&name, &base).expect("restore");
    }
    report
}
