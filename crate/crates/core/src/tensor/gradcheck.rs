//! Central finite-difference checking for autodiff ops.
//!
//! Runs at f64: evaluates the scalar function twice per input element with
//! a +/- h perturbation and compares the quotient against the analytic
//! gradient from [`Tensor::backward`].

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;

/// Lower bound on the comparison denominator so near-zero gradients are
/// compared absolutely instead of blowing up the relative error.
const DENOM_FLOOR: f64 = 1e-4;

/// Check the analytic gradient of `f` with respect to every element of
/// every input. `f` receives freshly built leaf tensors each evaluation and
/// must return a scalar. Returns a description of the worst mismatch, if
/// any exceeds the tolerance.
pub fn check_gradients<F>(
    shapes: &[&[usize]],
    values: &[Vec<f64>],
    f: F,
    h: f64,
    rel_tol: f64,
) -> std::result::Result<(), String>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    assert_eq!(shapes.len(), values.len());

    let build = |vals: &[Vec<f64>], grad: bool| -> Vec<Tensor<f64>> {
        shapes
            .iter()
            .zip(vals)
            .map(|(shape, data)| {
                let t = Tensor::from_vec(shape, data.clone()).expect("consistent shape");
                t.set_requires_grad(grad);
                t
            })
            .collect()
    };

    let leaves = build(values, true);
    let out = f(&leaves).map_err(|e| format!("forward failed: {e}"))?;
    out.backward().map_err(|e| format!("backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |vals: &[Vec<f64>]| -> std::result::Result<f64, String> {
        let leaves = build(vals, false);
        f(&leaves)
            .and_then(|t| t.item())
            .map_err(|e| format!("perturbed eval failed: {e}"))
    };

    for (input_idx, base) in values.iter().enumerate() {
        for elem in 0..base.len() {
            let mut plus = values.to_vec();
            plus[input_idx][elem] += h;
            let mut minus = values.to_vec();
            minus[input_idx][elem] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[input_idx][elem];
            let denom = a.abs().max(fd.abs()).max(DENOM_FLOOR);
            if (a - fd).abs() > rel_tol * denom {
                return Err(format!(
                    "input {input_idx} element {elem}: analytic {a:.9e} vs finite-diff {fd:.9e} \
                     (rel err {:.3e} > {rel_tol:.1e})",
                    (a - fd).abs() / denom
                ));
            }
        }
    }
    Ok(())
}
