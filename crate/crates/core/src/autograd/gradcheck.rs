//! Central finite-difference gradient checking.

use super::{Result, Tape, Tensor, Var};

/// Worst discrepancy found for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub index: usize,
    /// `max |analytic - numeric| / max(1, |numeric|)` over the input's entries.
    pub max_rel_error: f64,
    pub worst_entry: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item().expect("scalar function"))
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`, perturbing every entry of every input.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        let mut worst = (0.0, 0);
        let mut probe = inputs.to_vec();
        for j in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[j];
            probe[idx].data_mut()[j] = orig + h;
            let up = eval(&probe, &f)?;
            probe[idx].data_mut()[j] = orig - h;
            let down = eval(&probe, &f)?;
            probe[idx].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            if err > worst.0 {
                worst = (err, j);
            }
        }
        reports.push(InputReport { index: idx, max_rel_error: worst.0, worst_entry: worst.1 });
    }
    Ok(GradCheckReport { inputs: reports })
}
