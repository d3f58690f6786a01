//! Central finite-difference oracle for the hand-written reverse passes.

use super::params::{ParamId, ParamStore};
use super::tape::{BackwardFault, Tape, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding compare on an absolute scale. One ulp of a unit-size
/// loss divided by `2h` is about 1e-11 at `h = 1e-5`.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error)` in parameter order.
    pub groups: Vec<(String, f64)>,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.groups.iter().all(|(_, e)| *e <= self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    /// Parameters whose error exceeds the tolerance.
    pub fn failures(&self) -> Vec<&str> {
        self.groups.iter().filter(|(_, e)| *e > self.tolerance).map(|(n, _)| n.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elems_per_param: Option<usize>,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, max_elems_per_param: None, fault: None }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare the reverse-mode gradient of `loss_fn` against central differences
/// for every parameter of `store`.
pub fn grad_check<F>(store: &mut ParamStore, loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic: Vec<Option<super::Array>> = {
        let mut tape = Tape::new(store).with_check(true).with_fault(opts.fault);
        let loss = loss_fn(&mut tape)?;
        let g = tape.backward(loss)?;
        store.ids().map(|id| g.param(id).cloned()).collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut groups = Vec::new();
    let mut checked = 0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let stride = match opts.max_elems_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst = 0.0f64;
        for k in (0..n).step_by(stride) {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + opts.step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - opts.step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
        groups.push((store.name(id).to_string(), worst));
    }
    Ok(GradCheckReport { groups, tolerance: opts.tolerance, checked })
}
