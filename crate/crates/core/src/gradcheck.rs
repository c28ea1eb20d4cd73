//! Central-difference gradient oracle.
//!
//! The oracle only ever evaluates the forward function; it never consults a
//! backward rule, so it can check the tape's analytic gradients independently.
//! All arithmetic runs in `f64`.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-2;

/// Relative error `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, element)` of the worst element.
    pub worst: Option<(usize, usize)>,
}

impl GradReport {
    pub fn record(&mut self, input: usize, elem: usize, err: f64) {
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((input, elem));
        }
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the tape's gradient of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (e, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(i, e, rel_error(a, numeric));
        }
    }
    Ok(report)
}
