//! τ-controlled DDIM sampling and controllable decoding.
//!
//! The denoiser predicts the clean latent directly, so the noise estimate is
//! recovered algebraically. Each step blends that prediction with the decoded
//! latent `y_hat`:
//!
//! ```text
//! eps    = (y_t - sqrt(a_t) * D) / sqrt(1 - a_t)
//! y_prev = sqrt(a_p) * ((1 - τ²) D + τ² y_hat) + (1 - τ²) sqrt(1 - a_p) eps
//! ```
//!
//! With `τ = 1` every step collapses to `sqrt(a_p) * y_hat`, and the final
//! step (`a_0 = 1`) returns `y_hat` exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserKind};
use super::schedule::NoiseSchedule;
use super::FusionModel;
use crate::codec::{BaseCodec, Bitstream};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 10,
            tau: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps < 1 || self.steps > schedule.t_train() {
            return Err(Error::Config(format!(
                "steps must lie in 1..={}, got {}",
                schedule.t_train(),
                self.steps
            )));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
    }
    Ok(())
}

/// `steps + 1` evenly spaced timesteps from `t_train` down to `0`, so a run
/// makes `steps` denoiser calls.
pub fn timestep_grid(t_train: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_train {
        return Err(Error::Config(format!("steps must lie in 1..={t_train}, got {steps}")));
    }
    Ok((0..=steps)
        .map(|i| ((t_train * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect())
}

/// Scalar form of the noise estimate given cumulative `alpha_t < 1`.
pub fn predict_noise_scalar(y_t: f64, d_out: f64, alpha_t: f64) -> f64 {
    (y_t - alpha_t.sqrt() * d_out) / (1.0 - alpha_t).sqrt()
}

/// Scalar form of one τ-weighted DDIM step.
pub fn ddim_tau_scalar(y_t: f64, y_hat: f64, d_out: f64, alpha_t: f64, alpha_prev: f64, tau: f64) -> f64 {
    let eps = predict_noise_scalar(y_t, d_out, alpha_t);
    let w = tau * tau;
    alpha_prev.sqrt() * ((1.0 - w) * d_out + w * y_hat) + (1.0 - w) * (1.0 - alpha_prev).sqrt() * eps
}

/// Deterministic part of an ancestral step for step variance `beta` and
/// cumulative `abar`.
pub fn ancestral_scalar(x_t: f64, eps_hat: f64, beta: f64, abar: f64) -> f64 {
    (x_t - beta / (1.0 - abar).sqrt() * eps_hat) / (1.0 - beta).sqrt()
}

/// `(y_t - sqrt(a_t) D) / sqrt(1 - a_t)` elementwise; undefined at `t = 0`.
pub fn predict_noise(y_t: &Tensor, d_out: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    y_t.expect_same_shape(d_out)?;
    if t == 0 {
        return Err(Error::Domain("noise is undefined at t = 0 where alpha = 1".into()));
    }
    let a = schedule.alpha(t)?;
    y_t.zip_map(d_out, |y, d| predict_noise_scalar(y as f64, d as f64, a) as f32)
}

/// One step from `t` to `t_prev` on the subsampled grid.
pub fn ddim_step_tau(
    y_t: &Tensor,
    y_hat: &Tensor,
    d_out: &Tensor,
    t: usize,
    t_prev: usize,
    tau: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    y_t.expect_same_shape(y_hat)?;
    y_t.expect_same_shape(d_out)?;
    check_tau(tau)?;
    if t <= t_prev {
        return Err(Error::Domain(format!("a step must go backwards, got {t} -> {t_prev}")));
    }
    let (a_t, a_p) = (schedule.alpha(t)?, schedule.alpha(t_prev)?);
    let data = y_t
        .data()
        .iter()
        .zip(y_hat.data())
        .zip(d_out.data())
        .map(|((&y, &yh), &d)| ddim_tau_scalar(y as f64, yh as f64, d as f64, a_t, a_p, tau) as f32)
        .collect();
    Tensor::new(y_t.shape(), data)
}

/// Ancestral DDPM step `x_{t-1}` from `x_t` and a noise estimate.
pub fn ancestral_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    sigma_t: f64,
    rng: &mut R,
) -> Result<Tensor> {
    x_t.expect_same_shape(eps_hat)?;
    if t == 0 {
        return Err(Error::Domain("no ancestral step from t = 0".into()));
    }
    if !(sigma_t >= 0.0) {
        return Err(Error::Config(format!("sigma must be non-negative, got {sigma_t}")));
    }
    let beta = schedule.beta(t)?;
    let abar = schedule.alpha(t)?;
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| {
            let z: f64 = if sigma_t > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            (ancestral_scalar(x as f64, e as f64, beta, abar) + sigma_t * z) as f32
        })
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// Initial noise for image `index` of a run seeded with `seed`.
pub fn initial_noise(shape: &[usize], seed: u64, index: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    Tensor::randn(shape, &mut rng)
}

/// Run the sampler on a `[N, C, h, w]` batch of decoded latents. Image `i`
/// draws its starting noise from stream `first_index + i`, so results do not
/// depend on how images are batched.
pub fn sample(
    y_hat: &Tensor,
    config: &SamplerConfig,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    first_index: u64,
) -> Result<Tensor> {
    config.validate(schedule)?;
    if denoiser.kind != DenoiserKind::Conditional {
        return Err(Error::Contract("sampling needs the conditional denoiser".into()));
    }
    if y_hat.rank() != 4 {
        return Err(Error::shape(format!("expected a [N, C, h, w] batch, got {:?}", y_hat.shape())));
    }
    let n = y_hat.shape()[0];
    let rows: Vec<Tensor> = (0..n)
        .map(|i| initial_noise(&y_hat.shape()[1..], config.seed, first_index + i as u64))
        .collect();
    let mut y = Tensor::stack(&rows)?;
    let t_train = schedule.t_train() as f64;
    let grid = timestep_grid(schedule.t_train(), config.steps)?;
    for pair in grid.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let d = denoiser.predict(Some(&y), y_hat, &vec![t as f64 / t_train; n])?;
        y = ddim_step_tau(&y, y_hat, &d, t, t_prev, config.tau, schedule)?;
    }
    if !y.is_finite() {
        return Err(Error::NonFinite {
            context: "sampler output".into(),
        });
    }
    Ok(y)
}

/// `(1 - τ²) y_tilde + τ² y_hat`, the untreated fusion used with the
/// translator baseline.
pub fn linear_fusion(y_tilde: &Tensor, y_hat: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let w = tau * tau;
    y_tilde.zip_map(y_hat, |a, b| ((1.0 - w) * a as f64 + w * b as f64) as f32)
}

/// Single feed-forward translation of a `[N, C, h, w]` batch.
pub fn translate_variant1(y_hat: &Tensor, translator: &Denoiser) -> Result<Tensor> {
    if translator.kind != DenoiserKind::Translator {
        return Err(Error::Contract("expected a translator network".into()));
    }
    translator.predict(None, y_hat, &[])
}

fn check_base(base: &BaseCodec, expected: &[u8; 8]) -> Result<()> {
    let actual = base.model_hash();
    if &actual != expected {
        return Err(Error::HashMismatch {
            expected: crate::codec::bitstream::hex(expected),
            actual: crate::codec::bitstream::hex(&actual),
        });
    }
    Ok(())
}

/// Entropy-decode, sample at `τ`, synthesize and clamp to `[0, 1]`.
/// `index` selects the image's noise stream.
pub fn decode_controlled(
    bits: &Bitstream,
    config: &SamplerConfig,
    index: u64,
    base: &BaseCodec,
    fusion: &FusionModel,
) -> Result<Tensor> {
    check_base(base, &fusion.base_hash)?;
    let y_hat = base.decompress_latent(bits)?;
    let batch = Tensor::stack(std::slice::from_ref(&y_hat))?;
    let y0 = sample(&batch, config, &fusion.denoiser, &fusion.schedule, index)?;
    Ok(base.synthesis(&y0.index0(0))?.map(|v| v.clamp(0.0, 1.0)))
}

/// Decode through the translator baseline with linear fusion at `τ`.
pub fn decode_variant1(bits: &Bitstream, tau: f64, base: &BaseCodec, translator: &Denoiser) -> Result<Tensor> {
    let y_hat = base.decompress_latent(bits)?;
    let batch = Tensor::stack(std::slice::from_ref(&y_hat))?;
    let fused = linear_fusion(&translate_variant1(&batch, translator)?, &batch, tau)?;
    Ok(base.synthesis(&fused.index0(0))?.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::schedule::make_schedule;

    #[test]
    fn noise_estimate_scalar() {
        let e = predict_noise_scalar(1.0, 0.5, 0.72);
        assert!((e - 1.088_038_639_308_862_8).abs() < 1e-12, "{e}");
        assert_eq!(predict_noise_scalar(0.9_f64.sqrt() * 2.0, 2.0, 0.9), 0.0);
    }

    #[test]
    fn tau_step_scalar() {
        let v = ddim_tau_scalar(1.0, 2.0, 0.5, 0.72, 0.9, 0.5);
        assert!((v - 1.088_148_906_980_681).abs() < 1e-12, "{v}");
        assert_eq!(ddim_tau_scalar(0.3, 2.0, -7.0, 0.72, 0.9, 1.0), 0.9_f64.sqrt() * 2.0);
        assert_eq!(ddim_tau_scalar(0.3, 2.5, -7.0, 0.72, 1.0, 1.0), 2.5);
    }

    #[test]
    fn grid_endpoints_and_length() {
        assert_eq!(timestep_grid(1000, 1).unwrap(), vec![1000, 0]);
        assert_eq!(timestep_grid(1000, 4).unwrap(), vec![1000, 750, 500, 250, 0]);
        let g = timestep_grid(1000, 7).unwrap();
        assert_eq!(g.len(), 8);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(timestep_grid(5, 5).unwrap(), vec![5, 4, 3, 2, 1, 0]);
        assert!(timestep_grid(5, 6).is_err());
        assert!(timestep_grid(5, 0).is_err());
    }

    #[test]
    fn step_errors() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let z = Tensor::zeros([2]);
        assert!(ddim_step_tau(&z, &z, &z, 3, 3, 0.5, &s).is_err());
        assert!(ddim_step_tau(&z, &z, &z, 3, 1, 1.5, &s).is_err());
        assert!(predict_noise(&z, &z, 0, &s).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ancestral_step(&z, &z, 0, &s, 0.0, &mut rng).is_err());
    }

    #[test]
    fn ancestral_scalar_oracle() {
        let v = ancestral_scalar(1.0, 0.5, 0.1, 0.72);
        assert!((v - 0.954_490_169_278_260_4).abs() < 1e-12, "{v}");
        assert_eq!(ancestral_scalar(2.0, 0.0, 0.19, 0.5), 2.0 / 0.81_f64.sqrt());
    }

    #[test]
    fn ancestral_tensor_matches_scalar() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let x = Tensor::new([3], vec![1.0, -0.5, 2.0]).unwrap();
        let e = Tensor::new([3], vec![0.5, 0.1, -1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = ancestral_step(&x, &e, 4, &s, 0.0, &mut rng).unwrap();
        let (b, a) = (s.beta(4).unwrap(), s.alpha(4).unwrap());
        for i in 0..3 {
            let want = ancestral_scalar(x.data()[i] as f64, e.data()[i] as f64, b, a);
            assert!((out.data()[i] as f64 - want).abs() < 1e-6);
        }
        let r1 = ancestral_step(&x, &e, 4, &s, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r2 = ancestral_step(&x, &e, 4, &s, 0.3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(r1, r2);
    }

    #[test]
    fn seeds_select_independent_noise() {
        let a = initial_noise(&[2, 3], 5, 0);
        assert_eq!(a, initial_noise(&[2, 3], 5, 0));
        assert_ne!(a, initial_noise(&[2, 3], 5, 1));
        assert_ne!(a, initial_noise(&[2, 3], 6, 0));
    }
}
