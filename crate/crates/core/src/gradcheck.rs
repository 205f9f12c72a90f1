//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `"name[flat index]"` of the worst entry.
    pub worst: String,
    /// Analytic and finite-difference values at the worst entry.
    pub worst_pair: (f64, f64),
    pub entries: usize,
}

/// Finite-difference formula used as the reference derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x + h) - f(x - h)) / 2h`.
    Central,
    /// `(8 (f(x + h) - f(x - h)) - (f(x + 2h) - f(x - 2h))) / 12h`, fourth-order accurate.
    FivePoint,
}

/// Compares `backward` against central differences for every entry of every
/// parameter in `store`. The error of one entry is
/// `|analytic - fd| / max(1e-8, |analytic| + |fd|)`.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_with(store, h, Stencil::Central, f)
}

pub fn grad_check_with<F>(store: &mut ParamStore, h: f64, stencil: Stencil, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, store)?;
        let v = g.value(l).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("loss is {v} during gradient probing")))
        }
    };

    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?.write_to(store);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), worst_pair: (0.0, 0.0), entries: 0 };
    for id in store.ids().collect::<Vec<_>>() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            let mut diff = |k: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[i] = orig + k * h;
                let up = eval(store);
                store.value_mut(id).data_mut()[i] = orig - k * h;
                let down = eval(store);
                store.value_mut(id).data_mut()[i] = orig;
                Ok(up? - down?)
            };
            let fd = match stencil {
                Stencil::Central => diff(1.0)? / (2.0 * h),
                Stencil::FivePoint => (8.0 * diff(1.0)? - diff(2.0)?) / (12.0 * h),
            };
            let analytic = store.get(id).grad.data()[i];
            let err = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-8);
            report.entries += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{}[{i}]", store.get(id).name);
                report.worst_pair = (analytic, fd);
            }
        }
    }
    Ok(report)
}
