//! Central finite-difference oracle for analytic gradients.

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Builder for a finite-difference gradient check over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    h: f64,
    only: Option<Vec<ParamId>>,
    max_per_param: Option<usize>,
    analytic_offset: f64,
}

impl GradCheck {
    pub fn new(h: f64) -> Self {
        Self {
            h,
            only: None,
            max_per_param: None,
            analytic_offset: 0.0,
        }
    }

    /// Restrict the check to these parameters.
    pub fn params(mut self, ids: &[ParamId]) -> Self {
        self.only = Some(ids.to_vec());
        self
    }

    /// Check at most `n` evenly strided scalars of each parameter.
    pub fn max_per_param(mut self, n: usize) -> Self {
        self.max_per_param = Some(n.max(1));
        self
    }

    /// Adds a constant to every analytic gradient entry. Negative-control hook.
    pub fn perturb_analytic(mut self, offset: f64) -> Self {
        self.analytic_offset = offset;
        self
    }

    pub fn run<F>(&self, store: &mut ParamStore, mut f: F) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
    {
        store.zero_grad();
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        g.backward(root, store)?;

        let ids: Vec<ParamId> = match &self.only {
            Some(ids) => ids.clone(),
            None => store.ids().collect(),
        };
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_param: String::new(),
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            checked: 0,
        };
        let mut eval = |store: &ParamStore| -> Result<f64> {
            let mut g = Graph::new();
            let r = f(&mut g, store)?;
            Ok(g.value(r).data()[0])
        };
        for id in ids {
            let n = store.value(id).len();
            let stride = match self.max_per_param {
                Some(m) if m < n => n.div_ceil(m),
                _ => 1,
            };
            for idx in (0..n).step_by(stride) {
                let analytic = store.get(id).grad.data()[idx] + self.analytic_offset;
                let orig = store.value(id).data()[idx];
                let mut fx = [0.0; 2];
                for (slot, sign) in fx.iter_mut().zip([1.0, -1.0]) {
                    store.get_mut(id).value.data_mut()[idx] = orig + sign * self.h;
                    let v = eval(store);
                    store.get_mut(id).value.data_mut()[idx] = orig;
                    let v = v?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "objective is {v} after perturbing {}[{idx}] by {}{}",
                            store.get(id).name,
                            if sign > 0.0 { "+" } else { "-" },
                            self.h
                        )));
                    }
                    *slot = v;
                }
                let numeric = (fx[0] - fx[1]) / (2.0 * self.h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_rel_error || report.checked == 1 {
                    report.max_rel_error = rel;
                    report.worst_param = store.get(id).name.clone();
                    report.worst_index = idx;
                    report.worst_analytic = analytic;
                    report.worst_numeric = numeric;
                }
            }
        }
        Ok(report)
    }
}

/// Checks every scalar of every parameter in `store` with step `h`.
pub fn finite_diff_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    GradCheck::new(h).run(store, f)
}
