use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine decay from `base_lr` at epoch 0 towards zero at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.total_epochs as f64;
        self.base_lr * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub momentum: f64,
    pub schedule: CosineSchedule,
}

impl OptimizerState {
    pub fn new(param_count: usize, base_lr: f64, momentum: f64, total_epochs: usize) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {base_lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("optimizer momentum {momentum} outside [0, 1)")));
        }
        if total_epochs == 0 {
            return Err(Error::config("schedule needs at least one epoch"));
        }
        Ok(Self {
            velocity: vec![0.0; param_count],
            momentum,
            schedule: CosineSchedule {
                base_lr,
                total_epochs,
            },
        })
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.schedule.lr(epoch)
    }
}

/// `v <- momentum * v + g; params <- params - lr(epoch) * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, epoch: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::config(format!(
            "sgd_step length mismatch: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if epoch >= state.schedule.total_epochs {
        return Err(Error::config(format!(
            "epoch {epoch} past schedule end {}",
            state.schedule.total_epochs
        )));
    }
    let lr = state.learning_rate(epoch);
    let mu = state.momentum;
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_first_step() {
        let mut params = [0.0, 0.0];
        let mut state = OptimizerState::new(2, 0.1, 0.0, 10).unwrap();
        sgd_step(&mut params, &[1.0, 1.0], &mut state, 0).unwrap();
        assert_eq!(params, [-0.1, -0.1]);
    }

    #[test]
    fn schedule_endpoint_barely_moves() {
        let mut params = [1.0];
        let mut state = OptimizerState::new(1, 0.1, 0.0, 100_000).unwrap();
        sgd_step(&mut params, &[1.0], &mut state, 99_999).unwrap();
        assert!((params[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn epoch_past_schedule_is_rejected() {
        let mut state = OptimizerState::new(1, 0.1, 0.9, 5).unwrap();
        assert!(sgd_step(&mut [0.0], &[0.0], &mut state, 5).is_err());
    }

    /// Scalar simulation of the same recurrence on f(x, y) = x^2 + 4 y^2.
    #[test]
    fn quadratic_bowl_descends_after_warmup() {
        let f = |p: &[f64]| p[0] * p[0] + 4.0 * p[1] * p[1];
        let mut params = [1.0, 1.0];
        let mut state = OptimizerState::new(2, 0.05, 0.5, 10).unwrap();
        let mut values = vec![f(&params)];
        for epoch in 0..10 {
            let g = [2.0 * params[0], 8.0 * params[1]];
            sgd_step(&mut params, &g, &mut state, epoch).unwrap();
            values.push(f(&params));
        }

        // Independent re-simulation with plain scalars.
        let (mut x, mut y, mut vx, mut vy) = (1.0f64, 1.0f64, 0.0f64, 0.0f64);
        let mut sim = vec![x * x + 4.0 * y * y];
        for epoch in 0..10 {
            let lr = 0.05 * 0.5 * (1.0 + (PI * epoch as f64 / 10.0).cos());
            vx = 0.5 * vx + 2.0 * x;
            vy = 0.5 * vy + 8.0 * y;
            x -= lr * vx;
            y -= lr * vy;
            sim.push(x * x + 4.0 * y * y);
        }
        for (a, b) in values.iter().zip(&sim) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in values[2..].windows(2) {
            assert!(w[1] < w[0], "objective rose: {values:?}");
        }
    }
}
