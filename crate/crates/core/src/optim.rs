//! Parameter storage with an adaptive-moment (Adam) optimizer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// A flat parameter vector with its gradient accumulator and Adam moments.
///
/// Sparse blocks (hash tables) skip the update for entries whose gradient is
/// exactly zero, leaving their value and moments untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub sparse: bool,
}

impl ParamBlock {
    pub fn new(value: Vec<f64>, sparse: bool) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            sparse,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn has_gradient(&self) -> bool {
        self.grad.iter().any(|&g| g != 0.0)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add_grad(&mut self, other: &[f64]) {
        debug_assert_eq!(other.len(), self.grad.len());
        for (g, o) in self.grad.iter_mut().zip(other) {
            *g += o;
        }
    }

    /// One Adam step from the accumulated gradient, then clears it.
    /// Returns `false` (and changes nothing) when no gradient was accumulated.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> bool {
        if !self.has_gradient() {
            return false;
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..self.value.len() {
            let g = self.grad[i];
            if self.sparse && g == 0.0 {
                continue;
            }
            let m = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            self.value[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            self.grad[i] = 0.0;
        }
        true
    }

    pub fn all_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_calculation() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut a = ParamBlock::new(vec![0.5], false);
        let mut b = ParamBlock::new(vec![0.5], false);
        a.grad[0] = 0.2;
        b.grad[0] = 0.2;
        a.adam_step(&cfg);
        b.adam_step(&cfg);
        // m = 0.1 * 0.2 = 0.02, v = 0.01 * 0.04 = 4e-4
        // m̂ = 0.02 / 0.1 = 0.2, v̂ = 4e-4 / 0.01 = 0.04
        // Δ = 0.01 * 0.2 / (0.2 + 1e-8)
        let expected = 0.5 - 0.01 * 0.2 / (0.2 + 1e-8);
        assert!((a.value[0] - expected).abs() < 1e-15);
        assert_eq!(a, b);
        assert!((a.m[0] - 0.02).abs() < 1e-15);
        assert!((a.v[0] - 4e-4).abs() < 1e-18);
        assert_eq!(a.grad[0], 0.0);
    }

    #[test]
    fn second_step_matches_recurrence() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = ParamBlock::new(vec![1.0], false);
        p.grad[0] = 1.0;
        p.adam_step(&cfg);
        p.grad[0] = -0.5;
        p.adam_step(&cfg);
        let m1 = 0.1;
        let v1 = 0.01;
        let m2 = 0.9 * m1 + 0.1 * -0.5;
        let v2 = 0.99 * v1 + 0.01 * 0.25;
        let x1 = 1.0 - 0.1 * (m1 / 0.1) / ((v1 / 0.01f64).sqrt() + 1e-8);
        let x2 = x1 - 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.9801f64)).sqrt() + 1e-8);
        assert!((p.value[0] - x2).abs() < 1e-14);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = ParamBlock::new(vec![1.0, 2.0], false);
        let before = p.clone();
        assert!(!p.adam_step(&cfg));
        assert_eq!(p, before);
    }

    #[test]
    fn sparse_block_skips_untouched_entries() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = ParamBlock::new(vec![1.0, 2.0, 3.0], true);
        p.grad[1] = 0.3;
        p.adam_step(&cfg);
        assert_eq!(p.value[0], 1.0);
        assert_eq!(p.value[2], 3.0);
        assert_eq!(p.m[0], 0.0);
        assert!(p.value[1] < 2.0);
    }
}
