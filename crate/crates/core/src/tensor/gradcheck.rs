use super::{Elem, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that a function whose true
/// gradient is zero is compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = if cfg!(feature = "f64") { 1e-9 } else { 1e-4 };

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − central‖₂ / max(‖analytic‖₂, ‖central‖₂, floor)` over
    /// the compared elements of all inputs.
    pub max_rel_error: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements whose ±step perturbation crosses a relu/abs kink.
    pub skipped: usize,
}

/// Compares tape gradients of `f` against central differences, one input
/// element at a time, and reports the relative error of the gradient as a
/// whole. Inputs whose gradient vanishes identically (a bias ahead of a
/// normalization) are then measured against the overall gradient scale
/// rather than against rounding noise. Perturbations that change the relu/abs activation
/// pattern are excluded from the comparison, since the function is not
/// differentiable across those boundaries.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor], track: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Usage("grad_check needs a scalar function".into()));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = run(inputs, true)?;
    let grads = tape.backward(out)?;
    let base_pattern = tape.activation_pattern();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(tape);

    let mut report = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let (mut diff, mut na, mut nc) = (0.0f64, 0.0f64, 0.0f64);
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            let plus = x0 + step as Elem;
            let minus = x0 - step as Elem;

            work[ti].data_mut()[j] = plus;
            let (tp, _, op) = run(&work, false)?;
            work[ti].data_mut()[j] = minus;
            let (tm, _, om) = run(&work, false)?;
            work[ti].data_mut()[j] = x0;

            if tp.activation_pattern() != base_pattern || tm.activation_pattern() != base_pattern {
                report.skipped += 1;
                continue;
            }
            let (fp, fm) = (tp.value(op).item() as f64, tm.value(om).item() as f64);
            // actual spacing after rounding of the perturbed inputs
            let central = (fp - fm) / (plus as f64 - minus as f64);
            let a = analytic[ti].data()[j] as f64;
            diff += (a - central).powi(2);
            na += a * a;
            nc += central * central;
            report.checked += 1;
        }
    }
    let denom = na.sqrt().max(nc.sqrt()).max(GRAD_CHECK_FLOOR);
    report.max_rel_error = diff.sqrt() / denom;
    Ok(report)
}
