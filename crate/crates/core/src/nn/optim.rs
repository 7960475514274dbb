use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{NnError, Result};
use crate::geometry::round_f32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.005 }
    }
}

/// Decoupled-decay Adam with the AMSGrad running maximum.
///
/// Parameters and moments are rounded to f32 after every step so a saved
/// checkpoint restores the exact training state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub vmax: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.blocks().iter().map(|b| Array2::zeros(b.value.dim())).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros(), vmax: zeros() }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update of every non-frozen block from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "optimizer tracks {} blocks, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, b) in store.blocks().iter().enumerate() {
            if b.grad.dim() != self.m[i].dim() || b.value.dim() != self.m[i].dim() {
                return Err(NnError::ShapeMismatch(format!("block {} changed shape", b.name)));
            }
            if b.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::Divergence(format!("non-finite gradient in {}", b.name)));
            }
        }
        self.step += 1;
        let AdamWConfig { learning_rate: lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let block = store.block_mut(id);
            if block.frozen {
                continue;
            }
            let (m, v, vmax) = (&mut self.m[i], &mut self.v[i], &mut self.vmax[i]);
            let p = block.value.as_slice_mut().expect("standard layout");
            let g = block.grad.as_slice().expect("standard layout");
            let ms = m.as_slice_mut().expect("standard layout");
            let vs = v.as_slice_mut().expect("standard layout");
            let vx = vmax.as_slice_mut().expect("standard layout");
            for k in 0..p.len() {
                let mut pk = p[k] - lr * weight_decay * p[k];
                let mk = round_f32(beta1 * ms[k] + (1.0 - beta1) * g[k]);
                let vk = round_f32(beta2 * vs[k] + (1.0 - beta2) * g[k] * g[k]);
                let vmk = vx[k].max(vk);
                pk -= lr * (mk / bc1) / ((vmk / bc2).sqrt() + eps);
                p[k] = round_f32(pk);
                ms[k] = mk;
                vs[k] = vk;
                vx[k] = vmk;
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Divergence(format!("non-finite value in {}", block.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn no_decay() -> AdamWConfig {
        AdamWConfig { weight_decay: 0.0, ..Default::default() }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[0.5, -0.25]]);
        let mut opt = AdamW::new(&s, no_decay());
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id), &array![[0.5, -0.25]]);
    }

    #[test]
    fn scalar_step_matches_hand_evaluation() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[1.0]]);
        s.block_mut(id).grad[[0, 0]] = 0.1;
        let mut opt = AdamW::new(&s, no_decay());
        opt.step(&mut s).unwrap();
        // m = 0.01, v = 1e-5, mhat = 0.1, vhat = 0.01 -> step = 1e-3 * 0.1 / (0.1 + 1e-8)
        let m = 0.1f64 * 0.1;
        let v = 0.001f64 * 0.01;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expect = 1.0 - 1e-3 * mhat / (vhat.sqrt() + 1e-8);
        assert!((s.value(id)[[0, 0]] - expect).abs() < 1e-7, "{} vs {expect}", s.value(id)[[0, 0]]);
        assert!((expect - 0.999).abs() < 1e-9);
    }

    #[test]
    fn decay_only_step_scales_parameters() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[2.0]]);
        let mut opt = AdamW::new(&s, AdamWConfig { learning_rate: 1e-3, weight_decay: 0.005, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert!((s.value(id)[[0, 0]] - 2.0 * (1.0 - 5e-6)).abs() < 1e-6);
    }

    #[test]
    fn amsgrad_maximum_never_shrinks() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[0.0, 0.0]]);
        let mut opt = AdamW::new(&s, no_decay());
        let mut last = opt.vmax[0].clone();
        for g in [1.0, 0.0, 0.0, 0.5, 2.0, 0.0] {
            s.block_mut(id).grad.fill(g);
            opt.step(&mut s).unwrap();
            assert!(opt.vmax[0].iter().zip(last.iter()).all(|(a, b)| a >= b));
            assert!(opt.v[0].iter().all(|&x| x >= 0.0));
            last = opt.vmax[0].clone();
        }
    }

    #[test]
    fn frozen_blocks_do_not_move() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[1.0]]);
        s.block_mut(id).grad[[0, 0]] = 1.0;
        s.set_frozen(id, true);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id)[[0, 0]], 1.0);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut s = ParamStore::new();
        let id = s.add("w", array![[1.0]]);
        s.block_mut(id).grad[[0, 0]] = f64::NAN;
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        assert!(matches!(opt.step(&mut s), Err(NnError::Divergence(_))));
    }

    #[test]
    fn step_decreases_convex_quadratic() {
        let target = array![[0.3, -0.7, 1.1]];
        let mut s = ParamStore::new();
        let id = s.add("w", array![[0.0, 0.0, 0.0]]);
        let mut opt = AdamW::new(&s, no_decay());
        let loss = |w: &Array2<f64>| (w - &target).mapv(|d| d * d).sum();
        for _ in 0..5 {
            let before = loss(s.value(id));
            s.zero_grad();
            let g = (s.value(id) - &target) * 2.0;
            s.block_mut(id).grad = g;
            opt.step(&mut s).unwrap();
            assert!(loss(s.value(id)) < before);
        }
    }
}
