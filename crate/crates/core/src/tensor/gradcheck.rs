//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{bail, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Location of the worst entry: `(input or parameter label, flat index)`.
    pub worst: Option<(WrtLabel, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WrtLabel {
    Input(usize),
    Param(ParamId),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Compares analytic gradients of the scalar produced by `build` with central
/// differences at step `h`, for every differentiable input and every stored
/// parameter.
///
/// Relative errors use the denominator `max(|a|, |n|, floor)` with
/// `floor = 1e-3 * max |n|` over the whole block, so entries whose true
/// gradient is negligible next to the block scale do not dominate.
pub fn check_gradients<F>(store: &ParamStore, inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        bail!(Usage, "gradient check needs a scalar objective");
    }
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, max_abs_err: 0.0, worst: None };
    let mut scratch_inputs = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| alloc::vec![0.0; t.len()]);
        let mut numeric = Vec::with_capacity(t.len());
        for j in 0..t.len() {
            let orig = t.data()[j];
            scratch_inputs[i].data_mut()[j] = orig + h;
            let fp = eval(store, &scratch_inputs)?;
            scratch_inputs[i].data_mut()[j] = orig - h;
            let fm = eval(store, &scratch_inputs)?;
            scratch_inputs[i].data_mut()[j] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        compare(&analytic, &numeric, WrtLabel::Input(i), &mut report);
    }

    let mut scratch = store.clone();
    for id in store.ids() {
        let t = store.value(id);
        let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| alloc::vec![0.0; t.len()]);
        let mut numeric = Vec::with_capacity(t.len());
        for j in 0..t.len() {
            let orig = t.data()[j];
            scratch.get_mut(id).tensor.data_mut()[j] = orig + h;
            let fp = eval(&scratch, inputs)?;
            scratch.get_mut(id).tensor.data_mut()[j] = orig - h;
            let fm = eval(&scratch, inputs)?;
            scratch.get_mut(id).tensor.data_mut()[j] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        compare(&analytic, &numeric, WrtLabel::Param(id), &mut report);
    }
    Ok(report)
}

fn compare(analytic: &[f64], numeric: &[f64], label: WrtLabel, report: &mut GradCheckReport) {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    for (j, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst = Some((label, j));
        }
    }
}
