//! Training loops for the auxiliary encoder, the fusion denoiser and the
//! translator baseline. Every loop borrows the base codec immutably; its
//! tensors enter the graph as constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig, DenoiserKind};
use super::schedule::{forward_noise, NoiseSchedule, ScheduleParams};
use super::{AuxEncoder, FusionModel, Variant1Model};
use crate::autograd::Graph;
use crate::codec::bitstream::hex;
use crate::codec::{quantize, sample_batch, step_abort, to_f64, validate_dataset, BaseCodec, QuantMode, StepRecord, TrainLog, TrainOptions};
use crate::error::{Error, Result};
use crate::metrics::{PerceptualProxy, PDIST_SEED};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::tensor::Tensor;

const AUX_SALT: u64 = 0xA0C5_E11C;
const FUSION_SALT: u64 = 0xF05E_D1FF;
const VARIANT_SALT: u64 = 0x7A17_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionOptions {
    /// Weight of the latent fit term against the perceptual term.
    pub lambda: f64,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub train: TrainOptions,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions {
            lambda: 1.0,
            schedule: ScheduleParams::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainOptions {
                steps: 3000,
                ..TrainOptions::default()
            },
        }
    }
}

fn check_batch(opts: &TrainOptions) -> Result<()> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(opts.learning_rate > 0.0) || !opts.learning_rate.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {}", opts.learning_rate)));
    }
    Ok(())
}

/// Noise every row of a `[N, ...]` batch at its own timestep.
fn noisy_batch(y: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let rows = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| forward_noise(&y.index0(i), t, &eps.index0(i), schedule))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows)
}

/// Fine-tune a copy of `g_a` so that the frozen decoder's output minimises
/// P-dist to the input.
pub fn train_aux_encoder(base: &BaseCodec, images: &[Tensor], opts: &TrainOptions) -> Result<(AuxEncoder, TrainLog)> {
    validate_dataset(images, &base.config)?;
    check_batch(opts)?;
    let mut aux = AuxEncoder::from_base(base)?;
    let mut opt = OptimizerState::new(AdamWConfig::default().with_lr(opts.learning_rate), &aux.params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ AUX_SALT);
    let proxy = PerceptualProxy::<f32>::new(PDIST_SEED);
    let mut log = TrainLog::default();
    for step in 0..opts.steps {
        let x = sample_batch(images, opts.batch_size, &mut rng)?;
        let mut g = Graph::new();
        let pa = aux.params.bind(&mut g, true);
        let pb = base.params.bind(&mut g, false);
        let pp = proxy.bind(&mut g);
        let xv = g.constant(x);
        let y = aux.g_a.forward(&mut g, &pa, xv)?;
        let noise = g.constant(Tensor::rand_uniform(g.shape(y), -0.5, 0.5, &mut rng));
        let y_tilde = g.add(y, noise)?;
        let x_hat = base.g_s.forward(&mut g, &pb, y_tilde)?;
        let loss = proxy.training_loss_var(&mut g, &pp, x_hat, xv)?;
        let record = StepRecord {
            step,
            loss: to_f64(&g, loss),
            rate: 0.0,
            distortion: to_f64(&g, loss),
            latent_fit: 0.0,
        };
        let grads = g.backward(loss).map_err(|e| step_abort("train_aux_encoder", &record, e))?;
        opt.step(&mut aux.params, &pa.grads(&g, &grads))?;
        if step % 100 == 0 {
            log::debug!("aux step {step}: pdist {:.5}", record.loss);
        }
        log.records.push(record);
    }
    Ok((aux, log))
}

/// Train the conditional denoiser with
/// `lambda * mse(y_bar, D) + pdist(x, g_s(D))`, where `y_bar` is the
/// noise-quantized auxiliary latent and `D` sees `y_hat` noised at a uniform
/// random timestep.
pub fn train_fusion(
    base: &BaseCodec,
    aux: &AuxEncoder,
    images: &[Tensor],
    opts: &FusionOptions,
) -> Result<(FusionModel, TrainLog)> {
    validate_dataset(images, &base.config)?;
    check_batch(&opts.train)?;
    if aux.base_hash != base.model_hash() {
        return Err(Error::HashMismatch {
            expected: hex(&base.model_hash()),
            actual: hex(&aux.base_hash),
        });
    }
    if aux.config != base.config {
        return Err(Error::Config("auxiliary encoder and base codec configs differ".into()));
    }
    if !(opts.lambda >= 0.0) || !opts.lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be non-negative, got {}", opts.lambda)));
    }
    let schedule = opts.schedule.build()?;
    let t_train = schedule.t_train();
    let mut denoiser = Denoiser::new(
        opts.denoiser.clone(),
        DenoiserKind::Conditional,
        base.config.latent_channels,
        opts.train.seed,
    )?;
    let mut opt = OptimizerState::new(AdamWConfig::default().with_lr(opts.train.learning_rate), &denoiser.params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.train.seed ^ FUSION_SALT);
    let proxy = PerceptualProxy::<f32>::new(PDIST_SEED);
    let mut log = TrainLog::default();
    for step in 0..opts.train.steps {
        let x = sample_batch(images, opts.train.batch_size, &mut rng)?;
        let n = x.shape()[0];
        let y_hat = quantize(&base.analysis_batch(&x)?, QuantMode::Eval, &mut rng);
        let y_bar = quantize(&aux.analysis_batch(&x)?, QuantMode::Train, &mut rng);
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=t_train)).collect();
        let eps = Tensor::randn(y_hat.shape(), &mut rng);
        let y_t = noisy_batch(&y_hat, &ts, &eps, &schedule)?;
        let fracs: Vec<f64> = ts.iter().map(|&t| t as f64 / t_train as f64).collect();

        let mut g = Graph::new();
        let pd = denoiser.params.bind(&mut g, true);
        let pb = base.params.bind(&mut g, false);
        let pp = proxy.bind(&mut g);
        let (xv, ytv, yhv, ybv) = (g.constant(x), g.constant(y_t), g.constant(y_hat), g.constant(y_bar));
        let d = denoiser.forward(&mut g, &pd, Some(ytv), yhv, &fracs)?;
        let fit = g.mse(d, ybv)?;
        let x_rec = base.g_s.forward(&mut g, &pb, d)?;
        let perc = proxy.training_loss_var(&mut g, &pp, x_rec, xv)?;
        let weighted = g.scale(fit, opts.lambda);
        let loss = g.add(weighted, perc)?;
        let record = StepRecord {
            step,
            loss: to_f64(&g, loss),
            rate: 0.0,
            distortion: to_f64(&g, perc),
            latent_fit: to_f64(&g, fit),
        };
        let grads = g.backward(loss).map_err(|e| step_abort("train_fusion", &record, e))?;
        opt.step(&mut denoiser.params, &pd.grads(&g, &grads))?;
        if step % 100 == 0 {
            log::debug!(
                "fusion step {step}: loss {:.5} fit {:.5} pdist {:.5}",
                record.loss,
                record.latent_fit,
                record.distortion
            );
        }
        log.records.push(record);
    }
    Ok((
        FusionModel {
            denoiser,
            schedule_params: opts.schedule,
            schedule,
            lambda: opts.lambda,
            base_hash: base.model_hash(),
        },
        log,
    ))
}

/// Train the time-free translator on the reconstruction term alone.
pub fn train_variant1(
    base: &BaseCodec,
    images: &[Tensor],
    config: &DenoiserConfig,
    opts: &TrainOptions,
) -> Result<(Variant1Model, TrainLog)> {
    validate_dataset(images, &base.config)?;
    check_batch(opts)?;
    let mut translator = Denoiser::new(config.clone(), DenoiserKind::Translator, base.config.latent_channels, opts.seed)?;
    let mut opt = OptimizerState::new(AdamWConfig::default().with_lr(opts.learning_rate), &translator.params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ VARIANT_SALT);
    let proxy = PerceptualProxy::<f32>::new(PDIST_SEED);
    let mut log = TrainLog::default();
    for step in 0..opts.steps {
        let x = sample_batch(images, opts.batch_size, &mut rng)?;
        let y_hat = quantize(&base.analysis_batch(&x)?, QuantMode::Eval, &mut rng);
        let mut g = Graph::new();
        let pt = translator.params.bind(&mut g, true);
        let pb = base.params.bind(&mut g, false);
        let pp = proxy.bind(&mut g);
        let (xv, yhv) = (g.constant(x), g.constant(y_hat));
        let y_tilde = translator.forward(&mut g, &pt, None, yhv, &[])?;
        let x_rec = base.g_s.forward(&mut g, &pb, y_tilde)?;
        let loss = proxy.training_loss_var(&mut g, &pp, x_rec, xv)?;
        let record = StepRecord {
            step,
            loss: to_f64(&g, loss),
            rate: 0.0,
            distortion: to_f64(&g, loss),
            latent_fit: 0.0,
        };
        let grads = g.backward(loss).map_err(|e| step_abort("train_variant1", &record, e))?;
        opt.step(&mut translator.params, &pt.grads(&g, &grads))?;
        log.records.push(record);
    }
    Ok((
        Variant1Model {
            translator,
            base_hash: base.model_hash(),
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, LossKind};
    use crate::data::synthetic_set;

    fn setup() -> (BaseCodec, Vec<Tensor>) {
        let base = BaseCodec::new(
            CodecConfig {
                latent_channels: 4,
                hidden_channels: 8,
                num_downsamples: 2,
                beta: 0.1,
                loss_kind: LossKind::Distortion,
            },
            1,
        )
        .unwrap();
        (base, synthetic_set(2, 6, 8).unwrap())
    }

    fn quick(steps: usize) -> TrainOptions {
        TrainOptions {
            steps,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 4,
        }
    }

    fn small_fusion(steps: usize) -> FusionOptions {
        FusionOptions {
            lambda: 1.0,
            schedule: ScheduleParams {
                t_train: 20,
                beta_min: 1e-3,
                beta_max: 0.2,
            },
            denoiser: DenoiserConfig {
                num_units: 1,
                channels: 8,
                time_embed_dim: 8,
            },
            train: quick(steps),
        }
    }

    #[test]
    fn zero_steps_keep_the_base_encoder() {
        let (base, imgs) = setup();
        let (aux, log) = train_aux_encoder(&base, &imgs, &quick(0)).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(aux.params.digest(), base.params.strip_prefix("g_a.").prefixed("aux_encoder.").digest());
    }

    #[test]
    fn stages_leave_the_base_untouched() {
        let (base, imgs) = setup();
        let before = base.digest();
        let (aux, _) = train_aux_encoder(&base, &imgs, &quick(2)).unwrap();
        let (fusion, log) = train_fusion(&base, &aux, &imgs, &small_fusion(2)).unwrap();
        let (v1, _) = train_variant1(&base, &imgs, &small_fusion(0).denoiser, &quick(2)).unwrap();
        assert_eq!(base.digest(), before);
        assert_eq!(log.records.len(), 2);
        assert!(log.records.iter().all(|r| r.latent_fit.is_finite() && r.distortion > 0.0));
        assert!(fusion.to_checkpoint().unwrap().params.iter().all(|(n, _)| n.starts_with("denoiser.")));
        assert!(v1.translator.params.iter().all(|(n, _)| n.starts_with("translator.")));
    }

    #[test]
    fn fusion_rejects_foreign_aux_and_bad_lambda() {
        let (base, imgs) = setup();
        let mut aux = AuxEncoder::from_base(&base).unwrap();
        let opts = FusionOptions {
            lambda: -1.0,
            ..small_fusion(1)
        };
        assert!(matches!(train_fusion(&base, &aux, &imgs, &opts), Err(Error::Config(_))));
        aux.base_hash = [0; 8];
        assert!(matches!(
            train_fusion(&base, &aux, &imgs, &small_fusion(1)),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn per_row_noise_levels() {
        let s = crate::fusion::make_schedule(10, 0.01, 0.2).unwrap();
        let y = Tensor::full([2, 1, 1, 1], 1.0);
        let e = Tensor::zeros([2, 1, 1, 1]);
        let out = noisy_batch(&y, &[0, 10], &e, &s).unwrap();
        assert_eq!(out.data()[0], 1.0);
        assert!((out.data()[1] as f64 - s.alpha(10).unwrap().sqrt()).abs() < 1e-6);
    }
}
