//! Finite-difference gradient checking. This is the independent oracle
//! the whole autodiff core is verified against: reverse-mode gradients are
//! compared componentwise to central differences of the forward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Relative-error denominator floor.
const DENOM_FLOOR: f64 = 1e-8;

/// Check the reverse-mode gradient of a scalar function of several tensors.
///
/// `build` must construct the function on the given tape from the supplied
/// leaves and return the scalar output node. Returns the maximum relative
/// error over every component of every input, with the relative error
/// defined as `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_multi<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = false;
                tape.leaf(&t)
            })
            .collect();
        let out = build(&mut tape, &ids)?;
        if tape.values(out).len() != 1 {
            return Err(CoreError::contract("grad_check: output must be scalar"));
        }
        let v = tape.scalar_value(out);
        if !v.is_finite() {
            return Err(CoreError::non_finite("grad_check: non-finite objective"));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let out = build(&mut tape, &ids)?;
    if tape.values(out).len() != 1 {
        return Err(CoreError::contract("grad_check: output must be scalar"));
    }
    if !tape.scalar_value(out).is_finite() {
        return Err(CoreError::non_finite("grad_check: non-finite objective"));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Central differences, one coordinate at a time.
    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.values()[j];
            work[i].values_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].values_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

/// Single-input convenience wrapper.
pub fn grad_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    grad_check_multi(|tape, ids| build(tape, ids[0]), core::slice::from_ref(x), h)
}
