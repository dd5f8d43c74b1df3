use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter, flat index, analytic, numeric) at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    /// Denominator floor used for the relative error.
    pub floor: f64,
}

/// Compares tape gradients against central differences for every entry of
/// every parameter in `params`.
///
/// `build` must bind parameters through [`Tape::param`] and return a scalar.
/// Relative error is `|a − n| / max(|a|, |n|, floor)` where
/// `floor = max(1e-8, 1e-6 · max|a|)`: entries a million times smaller than
/// the largest gradient are below what central differences resolve in f64
/// and are held to an absolute bound instead.
pub fn grad_check<F>(params: &ParamStore<f64>, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_sampled(params, eps, usize::MAX, build)
}

/// Like [`grad_check`] but visits at most `max_per_param` evenly strided
/// entries of each parameter.
pub fn grad_check_sampled<F>(
    params: &ParamStore<f64>,
    eps: f64,
    max_per_param: usize,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape, store)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar output, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = tape.param_grads(&grads);

    let g_max = analytic.values().flat_map(|g| g.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * g_max).max(1e-8);
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, floor };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        let stride = if n <= max_per_param { 1 } else { n.div_ceil(max_per_param) };
        for idx in (0..n).step_by(stride) {
            let orig = params.get(&name).unwrap().data()[idx];
            work.get_mut(&name).unwrap().data_mut()[idx] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), idx, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
