use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v ← μv + (g + λp)`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Param(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Param(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        })
    }

    /// Updates one named parameter in place. Velocity starts at zero.
    pub fn step(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if v.shape() != param.shape() {
            return Err(Error::shape("sgd_step", param.shape(), v.shape()));
        }
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for ((p, &g), vel) in param.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            *vel = mu * *vel + (g + wd * *p);
            *p -= lr * *vel;
        }
        Ok(())
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }
}

/// Step decay: `base · decay^(milestones passed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.decay.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut opt = Sgd::<f64>::new(0.9, 0.0).unwrap();
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        opt.step("p", &mut p, &Tensor::zeros(&[3]), 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn plain_gradient_descent() {
        let mut opt = Sgd::<f64>::new(0.0, 0.0).unwrap();
        let mut p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        opt.step("p", &mut p, &Tensor::new(&[2], vec![0.5, -1.0]).unwrap(), 0.1).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn shape_mismatch_and_bad_hyperparameters() {
        let mut opt = Sgd::<f64>::new(0.5, 0.0).unwrap();
        let mut p = Tensor::zeros(&[2]);
        assert!(matches!(opt.step("p", &mut p, &Tensor::zeros(&[3]), 0.1), Err(Error::Shape { .. })));
        assert!(Sgd::<f64>::new(1.0, 0.0).is_err());
        assert!(Sgd::<f64>::new(0.5, -1.0).is_err());
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule {
            base: 0.05,
            milestones: vec![30, 45],
            decay: 0.1,
        };
        assert_eq!(s.at_epoch(0), 0.05);
        assert!((s.at_epoch(30) - 0.005).abs() < 1e-15);
        assert!((s.at_epoch(59) - 0.0005).abs() < 1e-15);
    }
}
