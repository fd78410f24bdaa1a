use serde::{Deserialize, Serialize};

use crate::model::{Grads, Param};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(params: &[Param]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &Grads, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                if lr != 0.0 {
                    *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
                }
            }
        }
    }
}

/// Reduce-on-plateau learning-rate schedule driven by the validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    min_lr: f64,
    patience: usize,
    /// Minimum relative decrease of the best loss that counts as progress.
    threshold: f64,
    best: f64,
    stale_epochs: usize,
}

impl PlateauScheduler {
    pub const DEFAULT_THRESHOLD: f64 = 1e-4;

    pub fn new(lr: f64, factor: f64, min_lr: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            min_lr,
            patience,
            threshold: Self::DEFAULT_THRESHOLD,
            best: f64::INFINITY,
            stale_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss; returns true when the rate dropped.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.stale_epochs = 0;
            return false;
        }
        self.stale_epochs += 1;
        if self.stale_epochs < self.patience {
            return false;
        }
        self.stale_epochs = 0;
        let next = (self.lr * self.factor).max(self.min_lr).min(self.lr);
        let dropped = next < self.lr;
        self.lr = next;
        dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f32>) -> Param {
        Param {
            name: "w".into(),
            shape: vec![data.len()],
            data,
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = vec![param(vec![1.0, -2.0])];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &vec![vec![0.5, -3.0]], 0.1);
        assert!((p[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_with_zero_lr_is_a_no_op() {
        let mut p = vec![param(vec![0.0, -0.0, 3.5])];
        let before = p.clone();
        let mut adam = Adam::new(&p);
        for _ in 0..3 {
            adam.step(&mut p, &vec![vec![1.0, -1.0, 0.25]], 0.0);
        }
        let bits = |ps: &[Param]| ps[0].data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&before));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![param(vec![5.0])];
        let mut adam = Adam::new(&p);
        for _ in 0..2000 {
            let g = vec![vec![2.0 * (p[0].data[0] - 1.5)]];
            adam.step(&mut p, &g, 0.01);
        }
        assert!((p[0].data[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn plateau_drops_only_after_patience() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 0.1, 2);
        assert!(!s.observe(1.0));
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.5)); // 1 stale epoch
        assert!(s.observe(0.49999)); // below threshold: 2nd stale epoch -> drop
        assert_eq!(s.lr(), 0.5);
        assert!(!s.observe(0.6));
        assert!(s.observe(0.6));
        assert_eq!(s.lr(), 0.25);
        for _ in 0..10 {
            s.observe(1.0);
        }
        assert_eq!(s.lr(), 0.1);
        let mut zero = PlateauScheduler::new(0.0, 0.5, 1e-7, 1);
        zero.observe(1.0);
        zero.observe(1.0);
        assert_eq!(zero.lr(), 0.0);
    }
}
