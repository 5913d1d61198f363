//! Finite-difference checks for analytic gradients.

use super::{Graph, ParamStore, Result, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub checked: usize,
}

/// Compares `backward` against a five-point central difference of step `h`
/// for every scalar of every parameter in `store` (or every `stride`-th
/// scalar). The stencil's truncation error is `O(h⁴)`.
///
/// `loss` must build a scalar on the supplied graph.
pub fn check_gradients<F>(store: &ParamStore<f64>, h: f64, floor: f64, stride: usize, loss: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = loss(&mut g, s)?;
        g.value(v).item()
    };
    let analytic = {
        let mut g = Graph::new();
        let v = loss(&mut g, store)?;
        g.backward(v)?.param_grads(store)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        checked: 0,
    };
    let mut probe = store.clone();
    let stride = stride.max(1);
    let mut counter = 0usize;
    for (k, id) in store.ids().enumerate() {
        for i in 0..store.get(id).len() {
            counter += 1;
            if (counter - 1) % stride != 0 {
                continue;
            }
            let orig = store.get(id).data()[i];
            let mut at = |x: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = x;
                eval(&probe)
            };
            let (p1, m1) = (at(orig + h)?, at(orig - h)?);
            let (p2, m2) = (at(orig + 2.0 * h)?, at(orig - 2.0 * h)?);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = rel;
                report.worst_param = Some(format!("{}[{i}]", store.name(id)));
            }
        }
    }
    Ok(report)
}
