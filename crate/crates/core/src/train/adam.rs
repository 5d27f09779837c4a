use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of a single tensor, in place. `t >= 1`.
pub fn adam_update(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], lr: f64, t: u64, h: &AdamParams) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i] as f64;
        let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * gi;
        let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
        p[i] = (p[i] as f64 - step) as f32;
    }
}

/// Adam state for every parameter of a store, in registration order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamParams,
    /// Number of completed steps.
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, hyper: AdamParams) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { hyper, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the gradients held in `store`. Nothing changes
    /// if any gradient is non-finite; the error names the first such parameter.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).clone();
            let value = store.value_mut(id);
            adam_update(value.data_mut(), grad.data(), self.m[k].data_mut(), self.v[k].data_mut(), lr, self.step, &self.hyper);
        }
        Ok(())
    }
}
