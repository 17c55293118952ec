//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences and return the maximum relative error.
///
/// `f` receives a fresh tape plus one leaf id per entry of `params` (in
/// order) and must build a scalar loss from them. Every parameter entry is
/// perturbed by `±eps`; the relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`. `f` must be deterministic — it is
/// evaluated twice at the unperturbed point and any disagreement is an error.
pub fn grad_check<F>(mut f: F, params: &mut [Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    if let Some(i) = params.iter().position(|p| !p.requires_grad()) {
        return Err(Error::Parameter(format!(
            "parameter {i} does not require gradients"
        )));
    }

    let forward = |f: &mut F, params: &[Tensor]| -> Result<(f64, Tape, Vec<TensorId>)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &ids)?;
        let value = tape.scalar_value(loss)?;
        tape.backward(loss)?;
        Ok((value, tape, ids))
    };

    let (base_value, tape, ids) = forward(&mut f, params)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec))
        .collect::<Result<_>>()?;

    let (repeat_value, _, _) = forward(&mut f, params)?;
    if repeat_value.to_bits() != base_value.to_bits() {
        return Err(Error::Determinism(format!(
            "repeated evaluations differ: {base_value} vs {repeat_value}"
        )));
    }

    let eval = |f: &mut F, params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &ids)?;
        tape.scalar_value(loss)
    };

    let mut max_rel_err: f64 = 0.0;
    for p in 0..params.len() {
        for j in 0..params[p].numel() {
            let original = params[p].values()[j];

            params[p].values_mut()[j] = original + eps;
            let plus = eval(&mut f, params)?;
            params[p].values_mut()[j] = original - eps;
            let minus = eval(&mut f, params)?;
            params[p].values_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p][j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel_err)
}
