//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates forward values, so it is independent of every
//! backward rule it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Forward value of the scalar built by `build` at `inputs`.
pub fn eval_scalar<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Tape gradients and central-difference gradients (step `h`) for every input.
pub fn compare<F>(inputs: &[Tensor], h: f64, build: F) -> Result<Vec<(Vec<f64>, Vec<f64>)>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut result = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval_scalar(&probe, &build)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval_scalar(&probe, &build)?;
            probe[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        result.push((analytic, numeric));
    }
    Ok(result)
}

/// Largest gradient discrepancy over all inputs, relative to the largest
/// gradient magnitude of the same input: `max|a - n| / max(|a|, |n|)`.
///
/// An input whose gradients are both below `1e-10` everywhere counts as
/// agreeing exactly.
pub fn max_relative_error<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let pairs = compare(inputs, h, build)?;
    Ok(pairs
        .iter()
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-10 {
        return 0.0;
    }
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}
