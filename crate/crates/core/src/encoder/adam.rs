use serde::{Deserialize, Serialize};

pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64) -> Self {
        Self { beta1, beta2, epsilon: ADAM_EPSILON, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(grad.len(), self.m.len(), "gradient length differs from parameter count");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}
