use serde::{Deserialize, Serialize};

use crate::tensor::{Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moments are kept in f32 next to the weights.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params<f32>) -> Self {
        let zeros = |p: &Params<f32>| {
            let mut z = Params::new();
            for (name, t) in p.iter() {
                z.insert(name, Tensor::zeros(t.shape()));
            }
            z
        };
        Self {
            config,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// entry are left alone.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter").data_mut();
            let v = self.v.get_mut(name).expect("moment for every parameter").data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let m_new = beta1 * *mi as f64 + (1.0 - beta1) * gi;
                let v_new = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }

    /// Registers moments for parameters added after construction (grafting).
    pub fn track_new(&mut self, params: &Params<f32>) {
        for (name, t) in params.iter() {
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(t.shape()));
                self.v.insert(name, Tensor::zeros(t.shape()));
            }
        }
    }
}
