//! Central finite-difference oracle for gradient tests.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of `build` against the five-point central
/// difference `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` for every
/// parameter element (at most `max_per_param` evenly spaced per tensor).
pub fn check<F>(params: &ParamSet<f64>, h: f64, floor: f64, max_per_param: usize, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    let grads = g.backward(loss)?;

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new(p);
        let l = build(&mut g)?;
        Ok(g.value(l).item())
    };

    let mut report = GradReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let mut work = params.clone();
    for idx in 0..params.len() {
        let (name, t) = params.by_index(idx);
        let n = t.numel();
        let stride = (n / max_per_param.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = t.data()[e];
            let mut at = |x: f64| -> Result<f64> {
                work.by_index_mut(idx).data_mut()[e] = x;
                eval(&work)
            };
            let fd = (-at(orig + 2.0 * h)? + 8.0 * at(orig + h)? - 8.0 * at(orig - h)? + at(orig - 2.0 * h)?)
                / (12.0 * h);
            work.by_index_mut(idx).data_mut()[e] = orig;
            let an = grads.by_index(idx).1.data()[e];
            let err = rel_err(an, fd, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((name.to_string(), e, an, fd));
                }
            }
        }
    }
    Ok(report)
}
