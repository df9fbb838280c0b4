use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamSet};
use crate::error::{ensure_finite, Result};

/// Coordinates with both gradients below this magnitude are compared in
/// absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the analytic gradient of `f` with central differences at every
/// coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &ParamSet, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params);
    let out = f(&mut g, &bound)?;
    let value = g.value(out).item()?;
    ensure_finite(value, || "grad_check: f is not finite at params".into())?;
    let analytic = g.backward(out)?.collect(&bound, params)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let bound = g.bind_frozen(p);
        let out = f(&mut g, &bound)?;
        let v = g.value(out).item()?;
        ensure_finite(v, || "grad_check: f is not finite at a perturbed point".into())
    };

    let mut report =
        GradCheckReport { max_relative_error: 0.0, worst: None, coordinates: 0, passed: true };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let grad = analytic.get(name)?;
        for i in 0..tensor.len() {
            let original = tensor.data()[i];
            probe.get_mut(name).expect("same layout").data_mut()[i] = original + step;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("same layout").data_mut()[i] = original - step;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("same layout").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.to_string(), i));
            }
        }
    }
    report.passed = report.max_relative_error <= tol;
    Ok(report)
}
