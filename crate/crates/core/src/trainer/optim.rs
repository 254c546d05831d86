use crate::autodiff::{ParamMap, Tensor};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// AdamW moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T: Scalar> {
    pub m: ParamMap<T>,
    pub v: ParamMap<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamMap<T>) -> Self {
        let zeros: ParamMap<T> = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Decoupled decay `θ ← θ − lr·wd·θ`, then the bias-corrected Adam update. Parameters without
/// a gradient are decayed only.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamMap<T>,
    grads: &ParamMap<T>,
    state: &mut OptState<T>,
    lr: f64,
    wd: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (one, eps) = (T::one(), T::of(state.eps));
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let (lr, decay) = (T::of(lr), one - T::of(lr) * T::of(wd));
    for (name, p) in params.iter_mut() {
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            invalid!("optimizer state has no entry for {name}");
        };
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                invalid!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape());
            }
        }
        let gd = g.map(Tensor::data);
        for (i, ((x, mi), vi)) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).enumerate() {
            let gi = gd.map_or(T::zero(), |g| g[i]);
            *x *= decay;
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
