//! Adam optimizer with bias correction.

use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone)]
pub struct AdamState<T = f32> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state for parameters of the given shapes.
    pub fn new(shapes: &[&[usize]], lr: T) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }

    pub fn moments(&self, i: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[i], &self.v[i])
    }
}

/// One Adam update over `(name, param)` pairs and matching gradients.
/// A non-finite gradient aborts with the offending parameter named.
pub fn adam_step<T: Scalar>(
    params: &mut [(&str, &mut Tensor<T>)],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((pk, mk), (vk, &gk)) in p
            .data_mut()
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut().zip(g.data()))
        {
            *mk = state.beta1 * *mk + (T::one() - state.beta1) * gk;
            *vk = state.beta2 * *vk + (T::one() - state.beta2) * gk * gk;
            let mhat = *mk / bc1;
            let vhat = *vk / bc2;
            *pk = *pk - state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
