use super::{ComputeGraph, ParamStore, Tensor};
use crate::error::{PirError, Result};

/// `|analytic - numeric| / (|analytic| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-12)
}

/// Compares an analytic gradient against central differences.
///
/// `f` returns the function value and its analytic gradient at a point; only
/// the gradient at `point` is used. Returns the maximum relative error over
/// coordinates.
pub fn finite_difference_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let pairs = gradient_pairs(f, point, step)?;
    Ok(pairs.iter().map(|&(a, n)| relative_error(a, n)).fold(0.0, f64::max))
}

/// Analytic gradients at or below this magnitude are treated as zero.
pub const ZERO_GRADIENT: f64 = 1e-12;

/// A gradient check that separates coordinates whose analytic gradient is
/// (numerically) zero, e.g. a key bias under softmax shift invariance or a
/// bias whose absolute-error signs cancel. There the relative error
/// degenerates to `|numeric| / 1e-12`, so rounding noise in the difference
/// quotient would read as a failure; those coordinates are judged by
/// absolute error instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error over coordinates with a nonzero analytic gradient.
    pub max_relative: f64,
    /// Max `|analytic - numeric|` over coordinates with `|analytic| <= ZERO_GRADIENT`.
    pub max_abs_at_zero: f64,
    pub zero_coordinates: usize,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, relative_tol: f64, zero_tol: f64) -> bool {
        self.max_relative < relative_tol && self.max_abs_at_zero < zero_tol
    }
}

pub fn finite_difference_report<F>(f: F, point: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let pairs = gradient_pairs(f, point, step)?;
    let mut r = GradCheckReport { max_relative: 0.0, max_abs_at_zero: 0.0, zero_coordinates: 0, coordinates: pairs.len() };
    for (a, n) in pairs {
        if a.abs() <= ZERO_GRADIENT {
            r.zero_coordinates += 1;
            r.max_abs_at_zero = r.max_abs_at_zero.max((a - n).abs());
        } else {
            r.max_relative = r.max_relative.max(relative_error(a, n));
        }
    }
    Ok(r)
}

/// `(analytic, central difference)` for every coordinate.
fn gradient_pairs<F>(f: F, point: &[f64], step: f64) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(PirError::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(PirError::NonFinite(format!("function value {value} at the check point")));
    }
    if analytic.len() != point.len() {
        return Err(PirError::invalid("gradient length differs from point length"));
    }
    let mut probe = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let (up, _) = f(&probe)?;
        probe[i] = point[i] - step;
        let (down, _) = f(&probe)?;
        probe[i] = point[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(PirError::NonFinite(format!("function value near coordinate {i}")));
        }
        out.push((analytic[i], (up - down) / (2.0 * step)));
    }
    Ok(out)
}

/// Value and flattened parameter gradient of a scalar graph output, as a
/// function of the flattened parameters.
fn graph_function<'a>(
    graph: &'a ComputeGraph,
    params: &'a ParamStore,
    inputs: &'a [(&'a str, &'a Tensor)],
    output: &'a str,
) -> impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a {
    move |flat: &[f64]| {
        let mut p = params.clone();
        p.assign_flat(flat)?;
        let mut sess = graph.session();
        sess.forward(&p, inputs)?;
        let value = sess.get(output)?.data()[0];
        let grads = sess.backward(output, &Tensor::scalar(1.0))?;
        let mut flat_grad = Vec::with_capacity(flat.len());
        for (name, t) in p.iter() {
            match grads.params.get(name) {
                Some(g) => flat_grad.extend_from_slice(g.data()),
                None => flat_grad.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok((value, flat_grad))
    }
}

/// Finite-difference check of a scalar graph output with respect to every
/// parameter in `params`.
pub fn param_gradient_check(
    graph: &ComputeGraph,
    params: &ParamStore,
    inputs: &[(&str, &Tensor)],
    output: &str,
    step: f64,
) -> Result<f64> {
    finite_difference_check(graph_function(graph, params, inputs, output), &params.flatten(), step)
}

/// [`param_gradient_check`] with exactly-zero gradients reported separately.
pub fn param_gradient_report(
    graph: &ComputeGraph,
    params: &ParamStore,
    inputs: &[(&str, &Tensor)],
    output: &str,
    step: f64,
) -> Result<GradCheckReport> {
    finite_difference_report(graph_function(graph, params, inputs, output), &params.flatten(), step)
}
