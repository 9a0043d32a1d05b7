//! Central finite-difference verification of tape gradients.
//!
//! For each coordinate the analytic gradient `a` is compared with
//! `n = (f(x+h) − f(x−h)) / 2h` and the error is `|a − n| / max(1, |a|, |n|)`.
//! Coordinates where the one-sided differences disagree sharply sit on a
//! kink (ReLU at 0, `|x|` at 0) and are excluded instead of compared.

use alloc::vec::Vec;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Relative disagreement between forward and backward one-sided
    /// differences above which a coordinate is treated as non-smooth.
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            kink_tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// `(input, coordinate)` pairs skipped as non-smooth.
    pub excluded: Vec<(usize, usize)>,
}

fn evaluate<F>(
    f: &F,
    inputs: &[Tensor],
    with_grad: bool,
) -> Result<(f64, Tape, Vec<Var>), TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(with_grad);
            tape.leaf(t)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::Contract(
            "gradient check needs a scalar function".into(),
        ));
    }
    let value = tape.data(loss)[0];
    if with_grad {
        tape.backward(loss)?;
    }
    Ok((value, tape, vars))
}

/// Checks `f` with respect to a single input.
pub fn grad_check<F>(
    f: F,
    x: &Tensor,
    options: GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        core::slice::from_ref(x),
        options,
    )
}

/// Checks `f` with respect to every coordinate of every input.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    options: GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if !(options.step > 0.0) {
        return Err(TensorError::Parameter(
            "finite-difference step must be positive".into(),
        ));
    }
    let (f0, tape, vars) = evaluate(&f, inputs, true)?;
    let (again, _, _) = evaluate(&f, inputs, false)?;
    if f0.to_bits() != again.to_bits() {
        return Err(TensorError::UnreliableCheck(alloc::format!(
            "function returned {f0} then {again} for the same input"
        )));
    }
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    drop(tape);

    let h = options.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for i in 0..inputs[t].numel() {
            let original = inputs[t].data()[i];
            probe[t].data_mut()[i] = original + h;
            let (fp, _, _) = evaluate(&f, &probe, false)?;
            probe[t].data_mut()[i] = original - h;
            let (fm, _, _) = evaluate(&f, &probe, false)?;
            probe[t].data_mut()[i] = original;

            let forward = (fp - f0) / h;
            let backward = (f0 - fm) / h;
            let spread = (forward - backward).abs();
            if spread > options.kink_tolerance * 1f64.max(forward.abs()).max(backward.abs()) {
                report.excluded.push((t, i));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = grads[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}
