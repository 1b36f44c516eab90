//! First/second-moment gradient descent with bias correction.
//!
//! One optimizer state covers one flat parameter vector; the model and the
//! quantizer adapters each own their own state. Updates are elementwise and
//! deterministic: `m` and `v` track exponentially-decayed first and second
//! moments, both corrected for startup bias before the step.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

/// Moment-based optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct MomentOptimizer<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Float> MomentOptimizer<T> {
    /// Fresh state for `n` parameters with the usual decay constants
    /// (0.9, 0.999) and epsilon 1e-8.
    pub fn new(n: usize, lr: T) -> Self {
        let f = |x: f64| T::from(x).unwrap();
        Self {
            lr,
            beta1: f(0.9),
            beta2: f(0.999),
            eps: f(1e-8),
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `params` and `grads` must have the
    /// length given at construction.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        self.step += 1;
        let t = T::from(self.step as f64).unwrap();
        let corr1 = T::one() - self.beta1.powf(t);
        let corr2 = T::one() - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
