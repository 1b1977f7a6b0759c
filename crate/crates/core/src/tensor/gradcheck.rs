//! Central finite-difference verification of analytic gradients.

use super::params::{Gradients, ParamStore};
use super::{Graph, NodeId};
use crate::error::{Error, Result};

pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - central| / max(floor, |analytic| + |central|)` with
    /// `floor = GRAD_FLOOR * max(1, |f|)`: gradients below that level are
    /// under the round-off resolution of the difference quotient.
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub checked: usize,
    /// Entries whose perturbation flips a ReLU sign or a max-pool winner;
    /// these are excluded from the maximum.
    pub skipped_kinks: usize,
}

/// Compares the analytic gradient of the scalar built by `build` with respect
/// to parameter `param` against central differences with step `epsilon`.
/// At most `max_entries` entries are probed, spread evenly over the tensor.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    param: &str,
    epsilon: f64,
    max_entries: usize,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let idx = store
        .index_of(param)
        .ok_or_else(|| Error::UnknownParameter(param.to_string()))?;

    let (mut graph, root) = build(store)?;
    let f0 = graph.scalar(root)?;
    graph.backward(root)?;
    let mut grads = Gradients::new(store);
    graph.accumulate_param_grads(&mut grads);
    let numel = store.tensor(idx).numel();
    let analytic = grads.get(idx).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);

    let entries: Vec<usize> = if numel <= max_entries {
        (0..numel).collect()
    } else {
        let mut v: Vec<usize> = (0..max_entries).map(|i| i * numel / max_entries).collect();
        v.dedup();
        v
    };

    let eval = |delta: f64, entry: usize| -> Result<(f64, u64)> {
        let mut s = store.clone();
        s.tensor_mut(idx).data_mut()[entry] += delta;
        let (g, r) = build(&s)?;
        Ok((g.scalar(r)?, g.kink_fingerprint()))
    };
    let base_print = graph.kink_fingerprint();
    let floor = GRAD_FLOOR * f0.abs().max(1.0);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_entry: 0,
        checked: 0,
        skipped_kinks: 0,
    };
    for entry in entries {
        let (fp, print_p) = eval(epsilon, entry)?;
        let (fm, print_m) = eval(-epsilon, entry)?;
        if print_p != base_print || print_m != base_print {
            report.skipped_kinks += 1;
            continue;
        }
        let central = (fp - fm) / (2.0 * epsilon);
        let a = analytic[entry];
        let err = (a - central).abs() / (a.abs() + central.abs()).max(floor);
        report.checked += 1;
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst_entry = entry;
        }
    }
    Ok(report)
}
