//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(self, learning_rate: f64) -> Self {
        AdamWConfig {
            learning_rate,
            ..self
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            config,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// Apply one update to every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        let c = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = T::from_f64(1.0 - c.learning_rate * c.weight_decay);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + ob1 * gi;
                let vi = b2 * v.data()[i] + ob2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi.to_f64_lossy() / bc1;
                let vhat = vi.to_f64_lossy() / bc2;
                let update = c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                let pv = &mut p.data_mut()[i];
                *pv = *pv * decay - T::from_f64(update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new([values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamWConfig::default().with_lr(0.1), &p);
        opt.step(&mut p, &[Tensor::zeros([3])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn zero_gradient_applies_decoupled_decay() {
        let mut p = store(&[1.0, -2.0, 3.5]);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default().with_lr(0.1)
        };
        let mut opt = OptimizerState::new(cfg, &p);
        opt.step(&mut p, &[Tensor::zeros([3])]).unwrap();
        let got = p.by_name("p").unwrap().data();
        for (g, e) in got.iter().zip([1.0, -2.0, 3.5]) {
            assert!((g - e * 0.999).abs() < 1e-15);
        }
    }

    /// Scalar AdamW written out longhand.
    fn reference(x0: f64, steps: usize, cfg: AdamWConfig) -> Vec<f64> {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * (x - 3.0);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            x -= cfg.learning_rate * cfg.weight_decay * x;
            x -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            out.push(x);
        }
        out
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_reference() {
        let cfg = AdamWConfig {
            weight_decay: 0.05,
            ..AdamWConfig::default().with_lr(0.1)
        };
        let expect = reference(0.5, 5, cfg);
        let mut p = store(&[0.5]);
        let mut opt = OptimizerState::new(cfg, &p);
        for e in expect {
            let x = p.by_name("p").unwrap().data()[0];
            opt.step(&mut p, &[Tensor::scalar(2.0 * (x - 3.0))]).unwrap();
            assert!((p.by_name("p").unwrap().data()[0] - e).abs() < 1e-7);
        }
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &[Tensor::zeros([3])]).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
    }
}
