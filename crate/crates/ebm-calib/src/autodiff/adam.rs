//! Adam optimizer with bias correction.
//!
//! One [`AdamState`] per parameter tensor; `step` consumes a gradient slice
//! and updates the parameter in place. Hyperparameters follow the common
//! defaults (beta1 0.9, beta2 0.999, eps 1e-8).

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        Self {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
        }
    }

    /// Apply one update: `param -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, cfg: &AdamConfig, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..param.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_fixed_point() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        for _ in 0..10 {
            st.step(&cfg, &mut p, &[0.0, 0.0, 0.0]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // with bias correction the first update is lr * g / (|g| + eps')
        let cfg = AdamConfig::with_lr(0.01);
        let mut st = AdamState::new(1);
        let mut p = vec![5.0];
        st.step(&cfg, &mut p, &[123.456]);
        let delta = 5.0 - p[0];
        assert!((delta - 0.01).abs() < 1e-6, "delta = {delta}");
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (w - 3)^2, gradient 2(w - 3)
        let cfg = AdamConfig::with_lr(0.1);
        let mut st = AdamState::new(1);
        let mut w = vec![0.0];
        for _ in 0..200 {
            let g = 2.0 * (w[0] - 3.0);
            st.step(&cfg, &mut w, &[g]);
        }
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }
}
