use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::{r, Real, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over every parameter element of `|a − n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_err: f64,
    /// `(parameter index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub per_param: Vec<f64>,
    pub evaluations: usize,
}

/// Compares tape gradients of `f` against central differences with step `eps`.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a scalar node.
pub fn finite_difference_check<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).data()[0].to_f64().unwrap_or(f64::NAN))
    };

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        per_param: Vec::with_capacity(params.len()),
        evaluations: 1,
    };
    for (pi, (var, param)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(*var, param.shape());
        let mut worst_here = 0.0f64;
        for k in 0..param.numel() {
            let orig = param.data()[k];
            work[pi].data_mut()[k] = orig + r(eps);
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - r(eps);
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            report.evaluations += 2;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k].to_f64().unwrap_or(f64::NAN);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            if rel > worst_here {
                worst_here = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, k));
            }
        }
        report.per_param.push(worst_here);
    }
    Ok(report)
}
