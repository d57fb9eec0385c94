use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison over every parameter entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry, if any entry was checked.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of `loss` against
/// `(L(θ+eps) - L(θ-eps)) / (2·eps)` for every entry of every registered parameter.
///
/// The graph is restored to its original values before returning.
pub fn grad_check(graph: &mut Graph, loss: NodeId, eps: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut grads = graph.backward(loss)?;
    let params: Vec<(String, NodeId)> = graph.params().to_vec();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (name, id) in params {
        let original = graph.value(id).clone();
        let analytic = grads
            .take(id)
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; original.len()]);

        let mut probe = original.clone();
        for k in 0..original.len() {
            let theta = original.data()[k];
            let mut eval_at = |value: f64| -> Result<f64> {
                probe.data_mut()[k] = value;
                graph.set_leaf(id, probe.clone())?;
                graph.replay().map_err(|e| {
                    Error::Numeric(format!("{name}[{k}] perturbed to {value}: {e}"))
                })?;
                let l = graph.value(loss).item();
                if !l.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss with {name}[{k}] = {value}"
                    )));
                }
                Ok(l)
            };
            let plus = eval_at(theta + eps)?;
            let minus = eval_at(theta - eps)?;
            probe.data_mut()[k] = theta;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[k], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k));
            }
        }
        graph.set_leaf(id, original)?;
    }
    graph.replay()?;
    Ok(report)
}
