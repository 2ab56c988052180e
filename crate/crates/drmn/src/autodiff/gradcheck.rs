//! Central finite-difference verification of analytic gradients.

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use std::fmt;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Analytic/numeric pair at the worst element, for diagnostics.
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "loss {:.12}", self.loss)?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<24} max_rel_err {:.3e}  (analytic {:.6e}, numeric {:.6e})",
                e.name, e.max_rel_err, e.analytic, e.numeric
            )?;
        }
        write!(f, "worst {:.3e}", self.max_rel_err())
    }
}

/// Compares backward-pass gradients against central finite differences
/// (loss(x+h) - loss(x-h)) / 2h for every scalar of every parameter.
/// Relative error is |ga - gn| / max(|ga|, |gn|, 1e-8). The forward must be
/// deterministic: it is evaluated twice up front and a mismatch is an error,
/// since finite differences are meaningless under a changing function.
pub fn grad_check(
    params: &mut ParamSet,
    forward: impl Fn(&ParamSet) -> (Tape, NodeId),
    step: f64,
) -> Result<GradCheckReport> {
    let (tape_a, loss_a) = forward(params);
    let la = tape_a.value(loss_a).get(0, 0);
    let (tape_b, loss_b) = forward(params);
    let lb = tape_b.value(loss_b).get(0, 0);
    if la.to_bits() != lb.to_bits() {
        return Err(Error::Numeric(format!(
            "forward pass is not deterministic: {la:?} vs {lb:?} on repeated evaluation"
        )));
    }
    if !la.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {la}")));
    }
    let analytic = tape_a.backward(loss_a, params);

    let mut entries = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut worst = GradCheckEntry {
            name: params.name(p).to_string(),
            max_rel_err: 0.0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..params.value(p).data().len() {
            let orig = params.value(p).data()[k];
            params.value_mut(p).data_mut()[k] = orig + step;
            let (t, l) = forward(params);
            let up = t.value(l).get(0, 0);
            params.value_mut(p).data_mut()[k] = orig - step;
            let (t, l) = forward(params);
            let down = t.value(l).get(0, 0);
            params.value_mut(p).data_mut()[k] = orig;
            let gn = (up - down) / (2.0 * step);
            let ga = analytic.get(p).data()[k];
            let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-8);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.analytic = ga;
                worst.numeric = gn;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { entries, loss: la })
}
