use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr0: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(lr0: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", momentum)));
        }
        if weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!("negative weight decay {}", weight_decay)));
        }
        Ok(OptimizerState { lr0, momentum, weight_decay, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// `v <- momentum·v + g + wd·w; w <- w - lr·v` for every parameter, using
    /// the gradient stored in each tensor (absent gradients count as zero).
    /// Parameters must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], lr: f32) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::InvalidArgument(format!("negative learning rate {}", lr)));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(shape_err("sgd", format!("{} velocity buffers for {} parameters", self.velocity.len(), params.len())));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if v.len() != p.numel() {
                return Err(shape_err("sgd", format!("velocity has {} values, parameter {}", v.len(), p.numel())));
            }
            let grad = p.grad().map(<[f32]>::to_vec);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                v[i] = self.momentum * v[i] + g + self.weight_decay * data[i];
                data[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Polynomial decay `lr0 · (1 - step/total)^power`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub total_steps: usize,
    pub power: f64,
}

impl LrSchedule {
    pub fn new(lr0: f64, total_steps: usize, power: f64) -> Result<Self> {
        if !(lr0 > 0.0) || total_steps == 0 || !(power > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs lr0 > 0, total_steps > 0, power > 0 (got {}, {}, {})",
                lr0, total_steps, power
            )));
        }
        Ok(LrSchedule { lr0, total_steps, power })
    }

    /// Learning rate at `step`, clamped to `[0, total_steps]`.
    pub fn at(&self, step: usize) -> f64 {
        let s = step.min(self.total_steps) as f64;
        self.lr0 * (1.0 - s / self.total_steps as f64).powf(self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Tensor<f32> {
        let mut t = Tensor::full(&[1], v);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn plain_sgd() {
        let mut opt = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        let mut w = param(1.0, 2.0);
        opt.step(&mut [&mut w], 0.1).unwrap();
        assert!((w.data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_updates_velocity_only() {
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        let mut w = param(1.0, 2.0);
        opt.step(&mut [&mut w], 0.0).unwrap();
        assert_eq!(w.data()[0], 1.0);
        assert_eq!(opt.velocity()[0][0], 2.0);
        opt.step(&mut [&mut w], 0.0).unwrap();
        assert_eq!(opt.velocity()[0][0], 3.8);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        let mut w = param(0.7, 0.0);
        for _ in 0..5 {
            opt.step(&mut [&mut w], 0.5).unwrap();
        }
        assert_eq!(w.data()[0], 0.7);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(OptimizerState::new(0.1, 1.0, 0.0).is_err());
        assert!(OptimizerState::new(0.1, 0.5, -1.0).is_err());
        assert!(LrSchedule::new(0.0, 10, 0.9).is_err());
    }

    #[test]
    fn poly_schedule() {
        let s = LrSchedule::new(0.01, 100, 0.9).unwrap();
        assert_eq!(s.at(0), 0.01);
        assert_eq!(s.at(100), 0.0);
        assert_eq!(s.at(250), 0.0);
        assert!((s.at(50) - 0.0053589).abs() < 1e-7);
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            assert!(s.at(t) <= prev);
            prev = s.at(t);
        }
    }
}
