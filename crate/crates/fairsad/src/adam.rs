//! Adam with bias correction and decoupled weight decay.

use ndarray::Array2;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&Array2<f64>]) -> Self {
        Self {
            config,
            first: shapes.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            second: shapes.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the full parameter list; `grads[i]` must match
    /// `params[i]` in shape.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let g = &grads[i];
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let p = &mut *params[i];
            for ((p, &m), &v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                *p -= c.lr * c.weight_decay * *p;
            }
        }
    }
}
