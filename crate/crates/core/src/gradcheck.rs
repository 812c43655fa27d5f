//! Central-difference gradient checking against a [`ParamStore`].

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Upper bound on coordinates probed per parameter; 0 probes all.
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-4,
            max_coords: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares the analytic gradient of the scalar built by `loss` with a
/// central difference for every (or a strided subset of) parameter coordinate.
pub fn check_param_grads<F>(store: &ParamStore, cfg: GradCheck, loss: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |st: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, st)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let grads = g.backward(l, store)?;

    let mut work = store.clone();
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for id in store.ids() {
        let n = store.value(id).numel();
        let stride = if cfg.max_coords == 0 || n <= cfg.max_coords {
            1
        } else {
            n.div_ceil(cfg.max_coords)
        };
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + cfg.step;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - cfg.step;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let analytic = grads.get(id).data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report = GradReport {
                    max_rel_error: rel,
                    worst_param: store.param(id).name.clone(),
                    worst_index: i,
                    analytic,
                    numeric,
                    coords_checked: report.coords_checked,
                };
            }
        }
    }
    Ok(report)
}
