use serde::{Deserialize, Serialize};

use crate::nn::{Gradients, TransformerParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

/// Moments shaped like the flat parameter buffer, plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl OptimizerState {
    pub fn new(hyper: AdamWConfig, n_params: usize) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Clips `grads` in place and applies one decoupled-weight-decay Adam
    /// update at learning rate `lr`. Decay touches only tensors flagged in
    /// the layout (matrices and embeddings). Returns the pre-clip norm.
    pub fn update(&mut self, params: &mut TransformerParams<f32>, grads: &mut Gradients<f32>, lr: f64) -> f64 {
        let h = self.hyper;
        let norm = grads.data.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if h.grad_clip > 0.0 && norm > h.grad_clip {
            let c = (h.grad_clip / (norm + 1e-6)) as f32;
            grads.data.iter_mut().for_each(|g| *g *= c);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = h.eps as f32;
        let decay = (1.0 - lr * h.weight_decay) as f32;
        for e in &params.layout.entries {
            let r = e.range();
            let p = &mut params.data[r.clone()];
            let g = &grads.data[r.clone()];
            let m = &mut self.m[r.clone()];
            let v = &mut self.v[r];
            for i in 0..p.len() {
                if e.decay {
                    p[i] *= decay;
                }
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}
