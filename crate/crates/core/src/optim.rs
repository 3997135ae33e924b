//! Adam optimizer over flat parameter lists.

use crate::diffcore::Tensor;

/// Adam hyperparameters. `weight_decay` is classic L2 regularization folded
/// into the gradient before the moment updates.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Adam state for a fixed-order list of parameter tensors.
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            config,
            m,
            v,
            t: 0,
        }
    }

    /// One update step. `params` and `grads` must match the construction
    /// order; parameters are updated in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "parameter/gradient size mismatch");
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let grad = g.data()[i] + c.weight_decay * pd[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad * grad;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_adam_minimizes_quadratic() {
        // Minimize (x - 3)^2 from 0; Adam with a generous rate converges.
        let mut x = Tensor::scalar(0.0);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &[&x],
        );
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * (x.item().unwrap() - 3.0));
            adam.step(&mut [&mut x], &[&g]);
        }
        assert!((x.item().unwrap() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn test_zero_learning_rate_freezes_parameters() {
        let mut x = Tensor::vector(vec![1.0, -2.0]);
        let before = x.clone();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.0,
                ..AdamConfig::default()
            },
            &[&x],
        );
        let g = Tensor::vector(vec![5.0, -1.0]);
        for _ in 0..10 {
            adam.step(&mut [&mut x], &[&g]);
        }
        assert_eq!(x, before);
    }

    #[test]
    fn test_defaults_match_training_recipe() {
        let c = AdamConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.beta2, 0.999);
        assert_eq!(c.weight_decay, 1e-3);
    }
}
