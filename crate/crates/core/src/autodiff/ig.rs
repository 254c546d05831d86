use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Integrated-gradients attribution together with its completeness diagnostics.
#[derive(Debug, Clone)]
pub struct Attribution<T: Scalar> {
    pub attribution: Tensor<T>,
    pub f_input: T,
    pub f_baseline: T,
    /// `|Σ attribution - (f(x) - f(baseline))|`
    pub completeness_gap: T,
}

/// Integrated gradients on the midpoint grid `α_i = (i - 0.5) / steps`.
///
/// `f` returns the scalar output and its gradient at a point.
pub fn integrated_gradients<T, F>(
    mut f: F,
    input: &Tensor<T>,
    baseline: &Tensor<T>,
    steps: usize,
) -> Result<Attribution<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<(T, Tensor<T>)>,
{
    if input.shape() != baseline.shape() {
        return Err(Error::Shape {
            op: "integrated_gradients",
            lhs: input.shape().to_vec(),
            rhs: baseline.shape().to_vec(),
        });
    }
    if steps == 0 {
        return Err(Error::Invalid("integrated gradients needs at least one step".into()));
    }
    let delta: Vec<T> = input
        .data()
        .iter()
        .zip(baseline.data())
        .map(|(&x, &b)| x - b)
        .collect();
    let mut total = Tensor::zeros(input.shape());
    let mut point = baseline.clone();
    for i in 0..steps {
        let alpha = T::of((i as f64 + 0.5) / steps as f64);
        for ((p, &b), &d) in point.data_mut().iter_mut().zip(baseline.data()).zip(&delta) {
            *p = b + alpha * d;
        }
        let (value, grad) = f(&point)?;
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite(format!("integrated gradients at alpha {alpha}")));
        }
        total.add_assign(&grad)?;
    }
    let inv = T::one() / T::of(steps as f64);
    for (t, &d) in total.data_mut().iter_mut().zip(&delta) {
        *t = *t * inv * d;
    }
    let (f_input, _) = f(input)?;
    let (f_baseline, _) = f(baseline)?;
    let completeness_gap = (total.sum() - (f_input - f_baseline)).abs();
    Ok(Attribution {
        attribution: total,
        f_input,
        f_baseline,
        completeness_gap,
    })
}
