//! Central-difference verification of analytic gradients.

use super::array::{Array4, Real};
use super::graph::{Graph, NodeId, ParamStore};
use crate::error::Result;

/// Worst relative error over parameter tensors, `‖a − n‖ / max(‖a‖, ‖n‖)`,
/// with `a` the analytic and `n` the numeric gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    /// The same ratio over all checked entries at once.
    pub global_rel_error: f64,
    pub checked: usize,
    /// Entries whose `±eps` probes switched a ReLU or max-pool branch.
    pub skipped: usize,
}

/// Perturbs up to `per_param` entries of every parameter (evenly spaced)
/// by `±eps` and compares against backward. `build` must construct the
/// same scalar loss from the given parameters each time. Probes that cross
/// a kink of the loss are not comparable and are skipped.
pub fn gradcheck<T, F>(params: &ParamStore<T>, eps: f64, per_param: usize, build: F) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&ParamStore<T>) -> Result<(Graph<T>, NodeId)>,
{
    let (g, loss) = build(params)?;
    let grads = g.backward(loss)?;
    let pattern = g.branch_pattern();
    let mut out =
        GradCheck { max_rel_error: 0.0, worst_param: String::new(), global_rel_error: 0.0, checked: 0, skipped: 0 };
    let (mut gd, mut ga, mut gn) = (0.0f64, 0.0f64, 0.0f64);
    let mut work = params.clone();
    for id in params.ids() {
        let analytic = grads.get(id).unwrap_or_else(|| Array4::zeros(params.get(id).shape()));
        let len = analytic.len();
        let stride = len.div_ceil(per_param.max(1)).max(1);
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for i in (0..len).step_by(stride) {
            let orig = params.get(id).data()[i];
            work.data_mut(id)[i] = T::from_f64(orig.as_f64() + eps);
            let (gp, lp) = build(&work)?;
            work.data_mut(id)[i] = T::from_f64(orig.as_f64() - eps);
            let (gm, lm) = build(&work)?;
            work.data_mut(id)[i] = orig;
            if gp.branch_pattern() != pattern || gm.branch_pattern() != pattern {
                out.skipped += 1;
                continue;
            }
            let num = (gp.value(lp).item().as_f64() - gm.value(lm).item().as_f64()) / (2.0 * eps);
            let a = analytic.data()[i].as_f64();
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
            out.checked += 1;
        }
        gd += diff;
        ga += na;
        gn += nn;
        let scale = na.sqrt().max(nn.sqrt());
        let rel = if scale > 0.0 { diff.sqrt() / scale } else { 0.0 };
        if rel > out.max_rel_error || out.worst_param.is_empty() {
            out.max_rel_error = out.max_rel_error.max(rel);
            out.worst_param = params.name(id).to_string();
        }
    }
    let scale = ga.sqrt().max(gn.sqrt());
    out.global_rel_error = if scale > 0.0 { gd.sqrt() / scale } else { 0.0 };
    Ok(out)
}
