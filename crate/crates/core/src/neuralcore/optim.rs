//! Adaptive-moment optimizer with global-norm gradient clipping.

use super::params::{Gradients, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    first: Vec<Option<Tensor<F>>>,
    second: Vec<Option<Tensor<F>>>,
    steps: u64,
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm && norm > 0.0 {
        grads.scale(F::lit(max_norm / norm));
    }
    norm
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every trainable parameter that has a gradient.
    /// Non-trainable entries are never touched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &mut Gradients<F>) {
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(grads, max);
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let step_size = F::lit(c.lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let eps = F::lit(c.eps);
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id).data_mut();
            for (((pj, mj), vj), &gj) in p
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mj = b1 * *mj + (F::one() - b1) * gj;
                *vj = b2 * *vj + (F::one() - b2) * gj * gj;
                *pj = *pj - step_size * *mj / ((*vj * inv_bc2).sqrt() + eps);
            }
        }
    }
}
