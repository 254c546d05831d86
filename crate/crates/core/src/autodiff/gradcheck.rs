use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Named parameter tensors in a stable order.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        invalid!("finite-difference step {eps} outside [1e-7, 1e-3]");
    }
    Ok(())
}

/// Compares `analytic` against central differences `(f(x+eps) - f(x-eps)) / 2eps` for every
/// coordinate of every tensor in `params`.
///
/// `f` also receives the name of the tensor currently perturbed so callers can reuse
/// intermediates that do not depend on it.
pub fn grad_check<T, F>(
    params: &ParamMap<T>,
    analytic: &ParamMap<T>,
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamMap<T>, &str) -> Result<T>,
{
    check_eps(eps)?;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let Some(grad) = analytic.get(&name) else {
            invalid!("no analytic gradient for {name}");
        };
        if grad.shape() != params[&name].shape() {
            return Err(Error::Shape {
                op: "grad_check",
                lhs: params[&name].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for i in 0..grad.len() {
            let original = work[&name].data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = original + T::of(eps);
            let up = f(&work, &name)?;
            work.get_mut(&name).unwrap().data_mut()[i] = original - T::of(eps);
            let down = f(&work, &name)?;
            work.get_mut(&name).unwrap().data_mut()[i] = original;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("objective at {name}[{i}]")));
            }
            let numeric = (up.as_f64() - down.as_f64()) / (2.0 * eps);
            let a = grad.data()[i].as_f64();
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_gradient<T, F>(x: &Tensor<T>, eps: f64, mut f: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    check_eps(eps)?;
    let mut work = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let original = work.data()[i];
        work.data_mut()[i] = original + T::of(eps);
        let up = f(&work)?;
        work.data_mut()[i] = original - T::of(eps);
        let down = f(&work)?;
        work.data_mut()[i] = original;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.data_mut()[i] = (up - down) / T::of(2.0 * eps);
    }
    Ok(out)
}

/// Largest coordinate-wise [`relative_error`] between two equally shaped tensors.
pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| relative_error(x.as_f64(), y.as_f64()))
        .fold(0.0, f64::max)
}
