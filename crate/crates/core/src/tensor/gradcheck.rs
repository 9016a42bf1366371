use super::{ParameterSet, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// Parameter and flat index where the maximum was observed.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
}

/// Compares the tape's analytic gradients against central differences
/// `(f(p+h) - f(p-h)) / 2h`, coordinate by coordinate.
///
/// Frozen entries are skipped. With `max_per_tensor = Some(n)`, only every
/// `ceil(len / n)`-th coordinate of each tensor is perturbed (always starting
/// at index 0), which keeps large checks tractable while staying
/// deterministic. The relative error uses `max(|a|, |n|, 1e-8)` as
/// denominator.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParameterSet,
    h: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let analytic = analytic_grads(&f, params)?;
    finite_diff_check_against(f, params, &analytic, h, max_per_tensor)
}

/// Copy of `params` whose trainable entries carry the tape gradient of `f`.
pub fn analytic_grads<F>(f: &F, params: &ParameterSet) -> Result<ParameterSet>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    check_finite(tape.value(loss).data()[0])?;
    tape.backward(loss)?;
    let mut analytic = params.clone();
    analytic.clear_grads();
    analytic.pull_grads(&tape)?;
    Ok(analytic)
}

/// [`finite_diff_check`] against gradients supplied in `analytic`.
pub fn finite_diff_check_against<F>(
    f: F,
    params: &ParameterSet,
    analytic: &ParameterSet,
    h: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::config("h", "step must be positive"));
    }
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::new();
        let out = f(&mut t, p)?;
        let v = t.value(out).data()[0];
        check_finite(v)?;
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    let mut probe = params.clone();
    for (name, param) in params.iter() {
        if param.frozen {
            continue;
        }
        let len = param.tensor.len();
        let stride = max_per_tensor.map_or(1, |n| len.div_ceil(n.max(1)));
        let grad = analytic.get(name)?.grad().map(<[f64]>::to_vec);
        for idx in (0..len).step_by(stride) {
            let a = grad.as_ref().map_or(0.0, |g| g[idx]);
            let orig = param.tensor.data()[idx];
            probe.get_mut(name)?.data_mut()[idx] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[idx] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[idx] = orig;
            let n = (plus - minus) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            report.coordinates_checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((name.to_string(), idx));
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Gradient(format!("objective is not finite ({v})")))
    }
}
