//! ADAM with bias correction and a cosine-annealed learning rate.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Optimizer state. Moment buffers are created lazily on the first step and
/// always mirror the parameter shapes. No weight decay is applied.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.config.learning_rate = lr;
    }

    /// Apply one update. Non-finite gradients abort the update before any
    /// parameter or moment buffer is touched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AutodiffError::Optimizer(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite(format!("gradient of parameter #{i}")));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len() {
            return Err(AutodiffError::Optimizer("parameter list changed between steps".into()));
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let bc1 = 1.0 - (b1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (b2 as f64).powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi as f64 / bc1;
                let v_hat = *vi as f64 / bc2;
                *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` down to `base_lr * decay_rate` over
/// `total_epochs`; the rate stays at the floor afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f32,
    pub total_epochs: usize,
    pub decay_rate: f32,
}

impl CosineSchedule {
    pub fn new(base_lr: f32, total_epochs: usize) -> Self {
        Self {
            base_lr,
            total_epochs,
            decay_rate: 0.1,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let floor = self.base_lr as f64 * self.decay_rate as f64;
        if self.total_epochs == 0 || epoch >= self.total_epochs {
            return floor as f32;
        }
        let t = epoch as f64 / self.total_epochs as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        (floor + (self.base_lr as f64 - floor) * cos) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3f32, 0.5, -3.0, 250.0] {
            let mut p = vec![Tensor::vector(&[1.0])];
            let mut opt = Adam::new(AdamConfig::default());
            opt.step(&mut p, &[Tensor::vector(&[g])]).unwrap();
            let delta = p[0].data()[0] - 1.0;
            assert!((delta.abs() - 1e-3).abs() <= 1e-5, "g={g} delta={delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = vec![Tensor::vector(&[0.25, -4.0])];
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        }
        assert!((p[0].data()[0] - 0.25).abs() < 1e-12);
        assert!((p[0].data()[1] + 4.0).abs() < 1e-12);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_state() {
        let mut p = vec![Tensor::vector(&[1.0, 2.0])];
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut p, &[Tensor::vector(&[0.1, f32::NAN])]);
        assert!(matches!(err, Err(AutodiffError::NonFinite(_))));
        assert_eq!(p[0].data(), &[1.0, 2.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = vec![Tensor::vector(&[1.0, 2.0])];
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut p, &[Tensor::vector(&[0.1])]).is_err());
    }

    #[test]
    fn schedule_is_monotone_and_positive() {
        let s = CosineSchedule::new(1e-3, 50);
        assert_eq!(s.lr_at(0), 1e-3);
        let mut prev = f32::INFINITY;
        for e in 0..=60 {
            let lr = s.lr_at(e);
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
        assert!((s.lr_at(50) - 1e-4).abs() < 1e-9);
    }
}
