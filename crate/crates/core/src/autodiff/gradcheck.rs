//! Central finite-difference verification of tape gradients.

use std::fmt;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Entries whose difference stencil crossed a rectifier kink and were
    /// left out of the error.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.numel - e.kinks).sum()
    }

    pub fn kinks(&self) -> usize {
        self.entries.iter().map(|e| e.kinks).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "grad-check loss={:.6e} eps={:e} tol={:e} checked={} kinks={} max_rel_error={:.3e} {}",
            self.loss,
            self.epsilon,
            self.tolerance,
            self.checked(),
            self.kinks(),
            self.max_rel_error(),
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<32} n={:<6} kinks={:<4} max_abs={:.3e} max_rel={:.3e}",
                e.name, e.numel, e.kinks, e.max_abs_error, e.max_rel_error
            )?;
        }
        Ok(())
    }
}

fn evaluate<F>(f: &F, inputs: &[(String, Tensor)], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::InvalidInput(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// The relative error of an entry is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = 1e-5 · max(1, |f(x)|)`, which keeps entries whose true gradient
/// is zero from dividing rounding noise by zero.
///
/// An entry whose `±ε` evaluations put any rectifier input on a different
/// side of zero than the base point is not differentiable within the
/// stencil; it is counted in `kinks` and excluded from the error.
pub fn grad_check<F>(
    f: F,
    inputs: &[(String, Tensor)],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, inputs, true)?;
    let loss = tape.data(out)[0];
    let grads = tape.backward(out)?;
    let pattern = tape.relu_pattern();
    let floor = 1e-5 * loss.abs().max(1.0);
    let mut probe = inputs.to_vec();
    let mut entries = Vec::with_capacity(inputs.len());
    for (k, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[k]);
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        let mut kinks = 0;
        for i in 0..tensor.numel() {
            let x0 = tensor.data[i];
            probe[k].1.data[i] = x0 + epsilon;
            let (tp, _, op) = evaluate(&f, &probe, false)?;
            let plus = tp.data(op)[0];
            probe[k].1.data[i] = x0 - epsilon;
            let (tm, _, om) = evaluate(&f, &probe, false)?;
            let minus = tm.data(om)[0];
            probe[k].1.data[i] = x0;
            if tp.relu_pattern() != pattern || tm.relu_pattern() != pattern {
                kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data[i];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(numeric.abs()).max(floor));
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            numel: tensor.numel(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            kinks,
        });
    }
    Ok(GradCheckReport {
        loss,
        epsilon,
        tolerance,
        entries,
    })
}
