use crate::autodiff::NamedTensors;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::config::AdamConfig;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    m: NamedTensors<T>,
    v: NamedTensors<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &NamedTensors<T>) -> Self {
        let zeros: NamedTensors<T> = params
            .iter()
            .map(|(k, p)| (k.clone(), Matrix::zeros(p.rows(), p.cols())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn optimizer_step<T: Scalar>(
    params: &mut NamedTensors<T>,
    grads: &NamedTensors<T>,
    state: &mut AdamState<T>,
    learning_rate: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Argument(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::dim("optimizer_step", p.shape(), g.shape()));
        }
        if state.m.get(name).map(Matrix::shape) != Some(p.shape()) {
            return Err(Error::Argument(format!("optimizer state does not cover {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::of(learning_rate);
    let eps = T::of(cfg.eps);
    for (name, p) in params.iter_mut() {
        let g = grads[name].as_slice();
        let m = state.m.get_mut(name).expect("checked").as_mut_slice();
        let v = state.v.get_mut(name).expect("checked").as_mut_slice();
        for (i, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
