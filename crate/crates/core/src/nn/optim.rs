//! First-order adaptive-moment optimizer (Adam) over named parameters.

use super::Module;
use std::collections::HashMap;

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Apply one update step using the gradients currently accumulated in the
    /// module. Gradients are not cleared here.
    pub fn step(&mut self, model: &mut dyn Module) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let state = &mut self.state;
        model.for_each_param("", &mut |name, p| {
            let slot = state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            });
            for i in 0..p.value.len() {
                let g = p.grad[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
