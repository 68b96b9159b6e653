//! Adam with an externally driven first-moment coefficient.

use std::collections::HashMap;

use crate::nn::Module;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u32,
    /// Running product of the first-moment coefficients, for bias correction.
    beta1_prod: f64,
}

/// Per-tensor Adam state keyed by parameter name. Frozen tensors are skipped
/// entirely: no state, no update, so their bytes never change.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: HashMap::new() }
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// One update of every trainable weight with learning rate `lr` and
    /// first-moment coefficient `beta1`.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64, beta1: f64) {
        let cfg = self.config;
        let state = &mut self.state;
        model.visit_mut("", &mut |name, p| {
            if !p.is_trainable_weight() || p.grad.len() != p.value.len() {
                return;
            }
            let s = state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
                steps: 0,
                beta1_prod: 1.0,
            });
            s.steps += 1;
            s.beta1_prod *= beta1;
            let bc1 = 1.0 - s.beta1_prod;
            let bc2 = 1.0 - cfg.beta2.powi(s.steps as i32);
            let step_size = (lr / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let (b1, b2) = (beta1 as f32, cfg.beta2 as f32);
            let (eps, wd) = (cfg.eps as f32, cfg.weight_decay as f32);
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
                s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
                let denom = s.v[i].sqrt() / bc2_sqrt + eps;
                p.value[i] -= step_size * s.m[i] / denom;
            }
        });
    }
}
