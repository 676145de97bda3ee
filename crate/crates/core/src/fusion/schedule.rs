//! Diffusion noise schedule and the forward noising process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `betas[t - 1]` is the step variance at `t = 1..=T`; `alphas[t]` is the
/// cumulative signal retention with `alphas[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
}

/// Parameters that rebuild a linear schedule; stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t_train: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_train, self.beta_min, self.beta_max)
    }
}

/// Linear betas from `beta_min` to `beta_max` over `t_train` steps.
pub fn make_schedule(t_train: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_train < 1 {
        return Err(Error::Config("a schedule needs at least one step".into()));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min} and {beta_max}"
        )));
    }
    let betas = if t_train == 1 {
        vec![beta_min]
    } else {
        (0..t_train)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_train - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("a schedule needs at least one step".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("betas must be strictly increasing".into()));
        }
        let mut alphas = Vec::with_capacity(betas.len() + 1);
        alphas.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        if t == 0 {
            return Err(Error::Domain("beta_0 is undefined; steps start at t = 1".into()));
        }
        Ok(self.betas[t - 1])
    }

    /// Cumulative `alpha_t` for `t` in `0..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_train() {
            return Err(Error::Domain(format!("timestep {t} outside 0..={}", self.t_train())));
        }
        Ok(())
    }
}

/// `sqrt(alpha_t) * y + sqrt(1 - alpha_t) * eps`.
pub fn forward_noise(y: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    y.expect_same_shape(eps)?;
    let a = schedule.alpha(t)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    y.zip_map(eps, |yv, e| (sa * yv as f64 + sn * e as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_products() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert_eq!(s.alphas()[0], 1.0);
        assert!((s.alphas()[1] - 0.9).abs() < 1e-15);
        assert!((s.alphas()[2] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_ends_near_pure_noise() {
        let s = ScheduleParams::default().build().unwrap();
        assert_eq!(s.t_train(), 1000);
        assert!(s.alpha(1000).unwrap() < 0.01);
        assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
        assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
        assert!((s.beta(1).unwrap() - 1e-4).abs() < 1e-18 && (s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        assert!(s.alpha(11).is_err());
        assert!(s.beta(0).is_err());
    }

    #[test]
    fn forward_noise_endpoints() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let y = Tensor::new([3], vec![1.5, -2.0, 0.25]).unwrap();
        let eps = Tensor::new([3], vec![0.3, 0.1, -0.7]).unwrap();
        assert_eq!(forward_noise(&y, 0, &eps, &s).unwrap(), y);
        let zero = Tensor::zeros([3]);
        let a = s.alpha(7).unwrap().sqrt();
        let scaled = forward_noise(&y, 7, &zero, &s).unwrap();
        for (o, i) in scaled.data().iter().zip(y.data()) {
            assert!((*o as f64 - a * *i as f64).abs() < 1e-6);
        }
        assert!(forward_noise(&y, 11, &eps, &s).is_err());
    }
}
