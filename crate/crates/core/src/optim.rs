//! Adam with decoupled weight decay over a fixed-order parameter group,
//! plus the warmup/cosine learning-rate schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment buffers per tensor, indexed by the caller's fixed
/// visit order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub states: Vec<(Vec<f32>, Vec<f32>)>,
    pub step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, tensor_sizes: &[usize]) -> Self {
        let states = tensor_sizes
            .iter()
            .map(|&n| (vec![0.0f32; n], vec![0.0f32; n]))
            .collect();
        Self { cfg, states, step: 0 }
    }

    /// One update over the whole group. `tensors[i]` must be the same
    /// parameter at every call. Returns the L2 norm of the applied deltas.
    pub fn step_group(&mut self, lr_t: f32, tensors: &mut [(&mut [f32], &[f32])]) -> f64 {
        assert_eq!(tensors.len(), self.states.len(), "group shape changed");
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut delta_sq = 0.0f64;
        for ((param, grad), (m, v)) in tensors.iter_mut().zip(self.states.iter_mut()) {
            assert_eq!(param.len(), grad.len());
            assert_eq!(param.len(), m.len());
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let delta = lr_t * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * param[i]);
                param[i] -= delta;
                delta_sq += (delta as f64) * (delta as f64);
            }
        }
        delta_sq.sqrt()
    }
}

/// Linear warmup to `base`, then cosine decay to 10% of `base`.
pub fn lr_schedule(base: f32, warmup_steps: u64, total_steps: u64, step: u64) -> f32 {
    if warmup_steps > 0 && step < warmup_steps {
        return base * (step + 1) as f32 / warmup_steps as f32;
    }
    if total_steps <= warmup_steps {
        return base;
    }
    let progress =
        ((step - warmup_steps) as f32 / (total_steps - warmup_steps) as f32).clamp(0.0, 1.0);
    let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
    base * (0.1 + 0.9 * cosine)
}

/// Global L2 norm over all gradient buffers.
pub fn global_grad_norm(grads: &[&[f32]]) -> f64 {
    let mut sq = 0.0f64;
    for g in grads {
        for &x in *g {
            sq += (x as f64) * (x as f64);
        }
    }
    sq.sqrt()
}

/// Scale factor that caps the global norm at `max_norm` (1.0 when within).
pub fn clip_scale(norm: f64, max_norm: f64) -> f32 {
    if norm > max_norm && norm > 0.0 {
        (max_norm / norm) as f32
    } else {
        1.0
    }
}
