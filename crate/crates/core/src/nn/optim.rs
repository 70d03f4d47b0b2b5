use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::Scalar;

/// Linear warmup to `peak`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let left = self.total_steps.saturating_sub(step) as f64;
        self.peak * (left / decay).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with decoupled weight decay. Decay only touches tensors of rank >= 2.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    pub step: usize,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![F::zero(); e.value.len()]).collect();
        AdamW { cfg, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &mut Gradients<F>, lr: f64) {
        if let Some(clip) = self.cfg.clip_norm {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(F::lit(clip / norm));
            }
        }
        self.step += 1;
        let b1 = F::lit(self.cfg.beta1);
        let b2 = F::lit(self.cfg.beta2);
        let one = F::one();
        let bc1 = F::lit(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = F::lit(1.0 - self.cfg.beta2.powi(self.step as i32));
        let eps = F::lit(self.cfg.eps);
        let lr_f = F::lit(lr);
        let wd = F::lit(lr * self.cfg.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let entry = store.get_mut(id);
            let decay = entry.shape.len() >= 2;
            let g = &grads.values[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..entry.value.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut p = entry.value[j];
                if decay {
                    p = p - wd * p;
                }
                entry.value[j] = p - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule { peak: 4e-5, warmup_steps: 100, total_steps: 1000 };
        assert!((s.lr(0) - 4e-7).abs() < 1e-15);
        assert!((s.lr(99) - 4e-5).abs() < 1e-15);
        assert!((s.lr(100) - 4e-5).abs() < 1e-15);
        assert!((s.lr(550) - 2e-5).abs() < 1e-12);
        assert_eq!(s.lr(1000), 0.0);
    }

    #[test]
    fn adamw_minimises_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", vec![2], vec![3.0, -2.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, clip_norm: None, ..Default::default() }, &store);
        for _ in 0..2000 {
            let x = store.get(id).value.clone();
            let mut g = Gradients { values: vec![x.iter().map(|v| 2.0 * v).collect()] };
            opt.update(&mut store, &mut g, 0.01);
        }
        assert!(store.get(id).value.iter().all(|v| v.abs() < 1e-2));
    }
}
