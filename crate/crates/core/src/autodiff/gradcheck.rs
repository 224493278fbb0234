use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{NfmError, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1, |g_fd|)` over all checked scalars.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(ParamId, usize)>,
}

/// Compare backprop gradients of a scalar graph function against central
/// differences `(f(w + h) - f(w - h)) / 2h`.
///
/// `build` must be deterministic; it receives a fresh [`Graph`] seeded with
/// `seed` on every evaluation so dropout masks repeat. At most
/// `max_per_param` entries of each parameter are perturbed (evenly spaced).
pub fn grad_check<F>(
    store: &mut ParamStore,
    h: f64,
    seed: u64,
    training: bool,
    max_per_param: usize,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(training, seed);
        let loss = build(&mut g, store)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(NfmError::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new(training, seed);
    let loss = build(&mut g, store)?;
    if !g.value(loss).item().is_finite() {
        return Err(NfmError::NonFinite("grad_check objective".into()));
    }
    let analytic = g.backward(loss)?.param_grads(store);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let fd = (plus? - minus?) / (2.0 * h);
            let err = (analytic[id.0][j] - fd).abs() / fd.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((id, j));
                }
            }
        }
    }
    Ok(report)
}
