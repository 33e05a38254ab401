//! SGD with momentum under a cosine-annealed learning rate.
//!
//! Velocity convention: `v ← μ·v + g`, `p ← p − η·v`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::objective::LossParams;
use crate::real::Real;

pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 0.0;

/// Linear scaling rule for the initial learning rate.
pub fn base_lr_for(batch_size: usize) -> f64 {
    0.3 * batch_size as f64 / 256.0
}

/// Cosine-annealed learning rate with a floor of zero.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::Usage(format!("step {step} beyond schedule of {total_steps}")));
    }
    Ok(0.5 * base_lr * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub step: u64,
    pub total_steps: u64,
    /// One buffer per parameter tensor, lazily shaped on the first step.
    pub velocity: Vec<Vec<T>>,
    /// Velocities for the loss scalars `t` and `b`.
    pub scalar_velocity: [f64; 2],
}

impl<T: Real> OptimState<T> {
    pub fn new(base_lr: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        Ok(Self {
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            base_lr,
            step: 0,
            total_steps,
            velocity: Vec::new(),
            scalar_velocity: [0.0; 2],
        })
    }

    pub fn current_lr(&self) -> Result<f64> {
        lr_at(self.step.min(self.total_steps), self.total_steps, self.base_lr)
    }

    /// One update of every tensor in `params` and, when given, the learnable
    /// loss scalars (with their gradients `dt`, `db`), followed by clamping
    /// `t`. Returns the learning rate used.
    pub fn sgd_step(
        &mut self,
        params: Vec<&mut [T]>,
        grads: &[&[T]],
        scalars: Option<(&mut LossParams, f64, f64)>,
    ) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Usage("parameter set changed between steps".into()));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::Usage(format!(
                    "shape mismatch: param {}, grad {}, velocity {}",
                    p.len(),
                    g.len(),
                    v.len()
                )));
            }
        }
        let lr = self.current_lr()?;
        let (mu, wd, eta) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let grad = if self.weight_decay != 0.0 { gi + wd * *pi } else { gi };
                *vi = mu * *vi + grad;
                *pi -= eta * *vi;
            }
        }
        if let Some((loss, dt, db)) = scalars {
            if loss.learns_t() {
                self.scalar_velocity[0] = self.momentum * self.scalar_velocity[0] + dt;
                loss.t -= lr * self.scalar_velocity[0];
            }
            if loss.learns_b() {
                self.scalar_velocity[1] = self.momentum * self.scalar_velocity[1] + db;
                loss.b -= lr * self.scalar_velocity[1];
            }
            loss.clamp();
        }
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 0.3).unwrap(), 0.3);
        assert!(lr_at(100, 100, 0.3).unwrap().abs() < 1e-17);
        assert!((lr_at(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(matches!(lr_at(0, 0, 0.3), Err(Error::Config(_))));
        assert!(lr_at(101, 100, 0.3).is_err());
    }

    #[test]
    fn schedule_is_non_increasing() {
        let lrs: Vec<f64> = (0..=1000).map(|s| lr_at(s, 1000, 0.05).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn linear_scaling_rule() {
        assert!((base_lr_for(40) - 0.046875).abs() < 1e-15);
    }

    fn constant_lr_state(lr: f64) -> OptimState<f64> {
        // A huge horizon keeps the cosine factor at 1 for the first steps.
        OptimState::new(lr, u64::MAX).unwrap()
    }

    #[test]
    fn momentum_recurrence() {
        let mut st = constant_lr_state(0.1);
        let mut p = [1.0f64];
        st.sgd_step(vec![&mut p[..]], &[&[1.0][..]], None).unwrap();
        assert_eq!(st.velocity[0][0], 1.0);
        assert!((p[0] - 0.9).abs() < 1e-15);
        st.sgd_step(vec![&mut p[..]], &[&[1.0][..]], None).unwrap();
        assert!((st.velocity[0][0] - 1.9).abs() < 1e-15);
        assert!((p[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut st = constant_lr_state(0.25);
        st.momentum = 0.0;
        let mut p = [0.3f64, -1.7, 2.5];
        let g = [0.5f64, 0.125, -4.0];
        for _ in 0..3 {
            let before = p;
            st.sgd_step(vec![&mut p[..]], &[&g[..]], None).unwrap();
            for i in 0..3 {
                assert_eq!(p[i], before[i] - 0.25 * g[i]);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_params_bit_identical() {
        let mut st = OptimState::<f32>::new(0.5, 10).unwrap();
        let mut p = [0.1f32, 7.0, -3.25];
        st.sgd_step(vec![&mut p[..]], &[&[0.0f32; 3][..]], None).unwrap();
        assert_eq!(p, [0.1f32, 7.0, -3.25]);
    }

    #[test]
    fn t_is_clamped_after_update() {
        let mut st = constant_lr_state(1.0);
        let mut loss = LossParams { t: 99.5, ..LossParams::bce() };
        let mut p = [0.0f64];
        st.sgd_step(vec![&mut p[..]], &[&[0.0][..]], Some((&mut loss, -3.0, 0.5))).unwrap();
        assert_eq!(loss.t, 100.0);
        assert_eq!(loss.b, -10.5);

        let mut fixed = LossParams::supcon_fixed(0.5);
        st.sgd_step(vec![&mut p[..]], &[&[0.0][..]], Some((&mut fixed, 1.0, 1.0))).unwrap();
        assert_eq!((fixed.t, fixed.b), (2.0, 0.0));
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut st = constant_lr_state(0.1);
        let mut p = [1.0f64, 2.0];
        assert!(matches!(st.sgd_step(vec![&mut p[..]], &[&[1.0][..]], None), Err(Error::Usage(_))));
        assert!(matches!(st.sgd_step(vec![&mut p[..]], &[], None), Err(Error::Usage(_))));
    }
}
