//! RMSProp.

use super::{Gradients, ModelParameters, Real, Role};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp { rho: 0.9, eps: 1e-8 }
    }
}

impl RmsProp {
    /// `cache ← ρ·cache + (1−ρ)·g²`, `θ ← θ − lr·g / (√cache + ε)`.
    ///
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step<T: Real>(&self, params: &mut ModelParameters<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        grads.check_finite(params)?;
        let (rho, eps, lr) = (T::lit(self.rho), T::lit(self.eps), T::lit(lr));
        let one_minus = T::one() - rho;
        for i in 0..params.len() {
            let e = params.entry_mut(i);
            if e.role != Role::Param {
                continue;
            }
            let cache = e.cache.as_mut().expect("trainable tensors carry a cache");
            let g = grads.get(i).data();
            for ((theta, c), &g) in e.value.data_mut().iter_mut().zip(cache.data_mut()).zip(g) {
                *c = rho * *c + one_minus * g * g;
                *theta -= lr * g / (c.sqrt() + eps);
            }
        }
        params.step += 1;
        Ok(())
    }
}

pub fn rmsprop_step<T: Real>(params: &mut ModelParameters<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    RmsProp::default().step(params, grads, lr)
}
