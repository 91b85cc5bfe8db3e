use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::graph::Grads;
use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value before the update; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

/// Adam with per-parameter first/second moment buffers.
///
/// Parameters without a gradient in a step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<_> = store.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect();
        let v = m.clone();
        Self { config, step: 0, m, v }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let c = self.config;
        let norm = grads.global_norm();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut ids: Vec<ParamId> = grads.iter().map(|(id, _)| *id).collect();
        ids.sort();
        for id in ids {
            let g = grads.get(id).expect("present");
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= c.lr * mh / (vh.sqrt() + c.eps);
            });
        }
    }

    /// Rounds moment buffers to `f32`, mirroring [`ParamStore::round_to_f32`].
    pub fn round_to_f32(&mut self) {
        for b in self.m.iter_mut().chain(self.v.iter_mut()) {
            b.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use ndarray::array;

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, p);
            let sq = g.square(x);
            let l = g.sum(sq);
            let grads = g.backward(l);
            opt.update(&mut store, &grads);
        }
        assert!(store.value(p).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn params_without_gradient_are_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0]]);
        let b = store.add("b", array![[0.123456789]]);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let mut g = Graph::new();
        let x = g.param(&store, a);
        let l = g.sum(x);
        let grads = g.backward(l);
        opt.update(&mut store, &grads);
        assert_eq!(store.value(b)[[0, 0]].to_bits(), 0.123456789f64.to_bits());
        assert_ne!(store.value(a)[[0, 0]], 1.0);
    }
}
