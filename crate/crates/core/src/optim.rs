//! Adam with a piecewise-constant step-size schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Fraction of `steps` after which the step size drops.
    pub drop_at: f64,
    pub drop_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2.5e-4,
            steps: 5000,
            batch_size: 8,
            drop_at: 0.8,
            drop_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.drop_at) || !(self.drop_factor > 0.0) {
            return bad("drop_at must lie in [0, 1] and drop_factor must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be positive");
        }
        Ok(())
    }

    /// Step size used for the update at zero-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if (step as f64) < self.drop_at * self.steps as f64 {
            self.lr
        } else {
            self.lr * self.drop_factor
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: &OptimConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim("adam", "parameter count", self.m.len(), grads.len()));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "adam: gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (one - b1) * gv;
                v[i] = b2 * v[i] + (one - b2) * gv * gv;
                *pv -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_once() {
        let cfg = OptimConfig {
            steps: 100,
            ..OptimConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 2.5e-4);
        assert_eq!(cfg.lr_at(79), 2.5e-4);
        assert!((cfg.lr_at(80) - 2.5e-5).abs() < 1e-18);
        assert!((cfg.lr_at(99) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimConfig::default();
        let mut p = vec![Tensor::<f64>::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::<f64>::new([3], vec![4.0, -0.01, 0.0]).unwrap()];
        let mut adam = Adam::new(&cfg, &p);
        adam.step(&mut p, &g, 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 1.9).abs() < 1e-5);
        assert_eq!(p[0].data()[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let cfg = OptimConfig::default();
        let mut p = vec![Tensor::<f64>::new([2], vec![3.0, -4.0]).unwrap()];
        let mut adam = Adam::new(&cfg, &p);
        for _ in 0..2000 {
            let g = vec![p[0].map(|x| 2.0 * x)];
            adam.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2));
    }
}
