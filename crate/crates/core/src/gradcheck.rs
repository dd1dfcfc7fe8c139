//! Central-difference gradient verification at 64-bit precision.

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Maximum over input entries of `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must build a scalar from the given input variables using graph ops only.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, usize::MAX)
}

/// Like [`grad_check`], but probes at most `max_entries` evenly strided
/// entries per input. Large parameter tensors are checked this way.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_entries: usize,
) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    ensure!(eps > 0.0, Argument, "eps must be positive");
    ensure!(
        inputs.iter().all(|t| t.all_finite()),
        Argument,
        "inputs must be finite"
    );
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    let n_out = g.value(out).len();
    ensure!(
        n_out == 1,
        Contract,
        "grad_check needs a scalar function, got {} outputs",
        n_out
    );
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();
    drop(g);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item();
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = if n <= max_entries {
            1
        } else {
            n.div_ceil(max_entries)
        };
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
