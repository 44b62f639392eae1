//! Adam and the linear-warmup + cosine-decay learning-rate schedule.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one flat parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay reaching 0 at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = ((warmup_fraction * total_steps as f64).round() as usize)
            .min(total_steps.saturating_sub(1));
        LrSchedule {
            base_lr,
            total_steps,
            warmup_steps,
        }
    }

    pub fn cosine(base_lr: f64, total_steps: usize) -> Self {
        Self::new(base_lr, total_steps, 0.0)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self
            .total_steps
            .saturating_sub(1)
            .saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule::new(1e-4, 1000, 0.1);
        assert_eq!(s.warmup_steps, 100);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(50) - 5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(100), 1e-4);
        assert!(s.lr_at(999) <= 1e-3 * 1e-4);
        let mut prev = s.lr_at(100);
        for t in 101..1000 {
            let lr = s.lr_at(t);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn cosine_without_warmup_starts_at_base() {
        let s = LrSchedule::cosine(0.01, 1000);
        assert_eq!(s.lr_at(0), 0.01);
        assert!(s.lr_at(999).abs() < 1e-15);
        assert!((s.lr_at(999 / 2) - 0.005).abs() < 1e-4);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut adam = Adam::new(3, AdamConfig::default());
        let mut p = vec![0.25, 0.5, 0.75];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3], 0.1);
        }
        assert_eq!(p, vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(1, AdamConfig::default());
        let mut x = vec![5.0];
        for _ in 0..2000 {
            let g = 2.0 * (x[0] - 2.0);
            adam.step(&mut x, &[g], 0.05);
        }
        assert!((x[0] - 2.0).abs() < 1e-2);
    }
}
