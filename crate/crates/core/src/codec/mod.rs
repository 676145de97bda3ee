//! The fixed base codec: analysis transform `g_a`, quantizer, factorized
//! Gaussian entropy model with range coding, and synthesis transform `g_s`.
//!
//! Training minimises `rate + beta * L` where the rate is the estimated bits per
//! pixel under the entropy model and `L` is either a scaled MSE or a scaled
//! P-dist. Once trained the codec is frozen; everything downstream reads it
//! through [`BaseCodec`] and checks its [`BaseCodec::model_hash`].

pub mod bitstream;
pub mod checkpoint;
pub mod entropy;
pub mod range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{PerceptualProxy, PDIST_SEED};
use crate::nn::{Conv2d, ConvTranspose2d, LEAKY_SLOPE};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub use bitstream::{Bitstream, LatentCode};
pub use checkpoint::Checkpoint;
pub use entropy::{rate_estimate, ChannelGaussians, EntropyModel};

/// Name prefixes of the tensors that make up the frozen base codec.
pub const BASE_PREFIXES: [&str; 3] = ["g_a.", "g_s.", "entropy."];
/// Weight of MSE inside the training loss; with rate in bits per pixel,
/// beta from 0.01 to 1 spans low to high rate.
pub const MSE_LOSS_SCALE: f64 = 3000.0;
/// Multiplier on P-dist inside the training loss of a perception codec.
pub const PDIST_LOSS_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Distortion,
    Perception,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distortion" | "mse" => Ok(LossKind::Distortion),
            "perception" | "pdist" => Ok(LossKind::Perception),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub num_downsamples: usize,
    pub beta: f64,
    pub loss_kind: LossKind,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_channels: 32,
            hidden_channels: 64,
            num_downsamples: 3,
            beta: 0.1,
            loss_kind: LossKind::Distortion,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.latent_channels == 0 || self.hidden_channels == 0 || self.num_downsamples == 0 {
            return Err(Error::Config("channel counts and downsampling depth must be nonzero".into()));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        1 << self.num_downsamples
    }

    /// `[C, h, w]` latent shape of an `h x w` image.
    pub fn latent_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        let f = self.factor();
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::shape(format!(
                "image {height}x{width} is not divisible by {f} (2^{} downsamples)",
                self.num_downsamples
            )));
        }
        Ok([self.latent_channels, height / f, width / f])
    }
}

/// Strided 5x5 convolutions with leaky-ReLU between them.
#[derive(Clone, Debug)]
pub struct Analysis {
    convs: Vec<Conv2d>,
}

impl Analysis {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: &CodecConfig) -> Self {
        let d = config.num_downsamples;
        let convs = (0..d)
            .map(|i| {
                let cin = if i == 0 { 3 } else { config.hidden_channels };
                let cout = if i + 1 == d { config.latent_channels } else { config.hidden_channels };
                Conv2d::new(store, rng, &format!("{prefix}.conv{i}"), cin, cout, 5, 2, 2)
            })
            .collect();
        Analysis { convs }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            h = conv.forward(g, p, h)?;
        }
        Ok(h)
    }
}

/// Transposed 4x4 convolutions, each doubling the resolution.
#[derive(Clone, Debug)]
pub struct Synthesis {
    convs: Vec<ConvTranspose2d>,
}

impl Synthesis {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: &CodecConfig) -> Self {
        let d = config.num_downsamples;
        let convs = (0..d)
            .map(|i| {
                let cin = if i == 0 { config.latent_channels } else { config.hidden_channels };
                let cout = if i + 1 == d { 3 } else { config.hidden_channels };
                ConvTranspose2d::new(store, rng, &format!("{prefix}.deconv{i}"), cin, cout, 4, 2, 1)
            })
            .collect();
        Synthesis { convs }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let mut h = y;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            h = conv.forward(g, p, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-1/2, 1/2)` noise.
    Train,
    /// Rounding half away from zero.
    Eval,
}

pub fn quantize<R: Rng + ?Sized>(y: &Tensor, mode: QuantMode, rng: &mut R) -> Tensor {
    match mode {
        QuantMode::Eval => y.map(f32::round),
        QuantMode::Train => {
            let u = Tensor::<f32>::rand_uniform(y.shape(), -0.5, 0.5, rng);
            y.zip_map(&u, |a, b| a + b).expect("same shape")
        }
    }
}

/// Stack `[C, H, W]` images into an `[N, C, H, W]` batch.
pub fn batch_of(images: &[&Tensor]) -> Result<Tensor> {
    let owned: Vec<Tensor> = images.iter().map(|t| (*t).clone()).collect();
    Tensor::stack(&owned)
}

fn check_image(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!("expected a [3, H, W] image, got {:?}", x.shape()))),
    }
}

#[derive(Clone, Debug)]
pub struct BaseCodec {
    pub config: CodecConfig,
    pub params: ParamStore,
    pub g_a: Analysis,
    pub g_s: Synthesis,
    pub entropy: EntropyModel,
}

impl BaseCodec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let g_a = Analysis::new(&mut params, &mut rng, "g_a", &config);
        let g_s = Synthesis::new(&mut params, &mut rng, "g_s", &config);
        let entropy = EntropyModel::new(&mut params, "entropy", config.latent_channels);
        Ok(BaseCodec {
            config,
            params,
            g_a,
            g_s,
            entropy,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: CodecConfig = ckpt.meta_as("codec_config")?;
        let mut codec = BaseCodec::new(config, 0)?;
        codec.params.load_from(&ckpt.params)?;
        Ok(codec)
    }

    pub fn to_checkpoint(&self, seed: u64, steps: usize) -> Result<Checkpoint> {
        Ok(Checkpoint::new(self.params.clone())
            .with_meta("kind", "base")
            .with_meta(
                "codec_config",
                serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?,
            )
            .with_meta("seed", seed)
            .with_meta("steps", steps))
    }

    /// SHA-256 over the serialized g_a, g_s and entropy tensors.
    pub fn digest(&self) -> [u8; 32] {
        checkpoint::component_digest(&self.params, &BASE_PREFIXES)
    }

    /// First eight bytes of [`BaseCodec::digest`], as stored in bitstreams.
    pub fn model_hash(&self) -> [u8; 8] {
        self.digest()[..8].try_into().expect("8 bytes")
    }

    pub fn gaussians(&self) -> ChannelGaussians {
        self.entropy.snapshot(&self.params)
    }

    /// `g_a` on a batch `[N, 3, H, W]`.
    pub fn analysis_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.g_a.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// `g_s` on a batch `[N, C, h, w]`, unclamped.
    pub fn synthesis_batch(&self, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let x = self.g_s.forward(&mut g, &p, yv)?;
        Ok(g.value(x).clone())
    }

    /// `g_a` on one `[3, H, W]` image; returns `[C, h, w]`.
    pub fn analysis(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = check_image(x)?;
        self.config.latent_shape(h, w)?;
        Ok(self.analysis_batch(&batch_of(&[x])?)?.index0(0))
    }

    /// `g_s` on one `[C, h, w]` latent; returns `[3, H, W]`, unclamped.
    pub fn synthesis(&self, y: &Tensor) -> Result<Tensor> {
        if y.rank() != 3 || y.shape()[0] != self.config.latent_channels {
            return Err(Error::shape(format!(
                "expected a [{}, h, w] latent, got {:?}",
                self.config.latent_channels,
                y.shape()
            )));
        }
        Ok(self.synthesis_batch(&batch_of(&[y])?)?.index0(0))
    }

    /// Rounded, clamped symbols of one image.
    pub fn latent_code(&self, x: &Tensor) -> Result<LatentCode> {
        let y = self.analysis(x)?;
        let shape: [usize; 3] = y.shape().try_into().expect("rank 3");
        let mut code = LatentCode::new(shape, y.data().iter().map(|v| v.round() as i32).collect())?;
        code.clamp_to_support();
        Ok(code)
    }

    pub fn compress(&self, x: &Tensor) -> Result<Bitstream> {
        let code = self.latent_code(x)?;
        Bitstream::encode(&code, &self.gaussians(), self.model_hash())
    }

    /// Entropy-decode `ŷ` as a `[C, h, w]` tensor; refuses streams from
    /// another model.
    pub fn decompress_latent(&self, bits: &Bitstream) -> Result<Tensor> {
        let code = bits.decode(&self.gaussians(), self.model_hash())?;
        Tensor::new(code.shape, code.symbols.iter().map(|&s| s as f32).collect())
    }

    /// Plain base decode, clamped to `[0, 1]`.
    pub fn decompress(&self, bits: &Bitstream) -> Result<Tensor> {
        let y = self.decompress_latent(bits)?;
        Ok(self.synthesis(&y)?.map(|v| v.clamp(0.0, 1.0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            batch_size: 8,
            learning_rate: AdamWConfig::default().learning_rate,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Rate term in bits per pixel (zero for stages without a rate term).
    pub rate: f64,
    /// Unscaled distortion or perception term.
    pub distortion: f64,
    /// Mean squared latent fit (fusion stage only).
    #[serde(default)]
    pub latent_fit: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// Mean loss over the first and last tenth of the run.
    pub fn head_tail_means(&self) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n < 10 {
            return None;
        }
        let k = n / 10;
        let mean = |r: &[StepRecord]| r.iter().map(|s| s.loss).sum::<f64>() / r.len() as f64;
        Some((mean(&self.records[..k]), mean(&self.records[n - k..])))
    }
}

/// Random minibatch drawn with replacement.
pub(crate) fn sample_batch(images: &[Tensor], size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let picks: Vec<&Tensor> = (0..size).map(|_| &images[rng.random_range(0..images.len())]).collect();
    batch_of(&picks)
}

pub(crate) fn validate_dataset(images: &[Tensor], config: &CodecConfig) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let (h, w) = check_image(first)?;
    config.latent_shape(h, w)?;
    if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shape(format!(
            "training images differ in shape: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    Ok(())
}

pub(crate) fn to_f64(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

/// Train a base codec from scratch on `images` (`[3, H, W]` each).
pub fn train_base(images: &[Tensor], config: &CodecConfig, opts: &TrainOptions) -> Result<(BaseCodec, TrainLog)> {
    validate_dataset(images, config)?;
    let mut codec = BaseCodec::new(config.clone(), opts.seed)?;
    let mut opt = OptimizerState::new(AdamWConfig::default().with_lr(opts.learning_rate), &codec.params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_BA5E);
    let proxy = (config.loss_kind == LossKind::Perception).then(|| PerceptualProxy::<f32>::new(PDIST_SEED));
    let mut log = TrainLog::default();
    for step in 0..opts.steps {
        let x = sample_batch(images, opts.batch_size, &mut rng)?;
        let pixels = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
        let mut g = Graph::new();
        let p = codec.params.bind(&mut g, true);
        let xv = g.constant(x);
        let y = codec.g_a.forward(&mut g, &p, xv)?;
        let noise = g.constant(Tensor::rand_uniform(g.shape(y), -0.5, 0.5, &mut rng));
        let y_tilde = g.add(y, noise)?;
        let bits = codec.entropy.bits(&mut g, &p, y_tilde)?;
        let bits = g.sum(bits);
        let rate = g.scale(bits, 1.0 / pixels);
        let x_hat = codec.g_s.forward(&mut g, &p, y_tilde)?;
        let (dist, scale) = match &proxy {
            None => (g.mse(x_hat, xv)?, MSE_LOSS_SCALE),
            Some(proxy) => {
                let pp = proxy.bind(&mut g);
                (proxy.training_loss_var(&mut g, &pp, x_hat, xv)?, PDIST_LOSS_SCALE)
            }
        };
        let weighted = g.scale(dist, config.beta * scale);
        let loss = g.add(rate, weighted)?;
        let record = StepRecord {
            step,
            loss: to_f64(&g, loss),
            rate: to_f64(&g, rate),
            distortion: to_f64(&g, dist),
            latent_fit: 0.0,
        };
        let grads = g.backward(loss).map_err(|e| step_abort("train_base", &record, e))?;
        opt.step(&mut codec.params, &p.grads(&g, &grads))?;
        if step % 100 == 0 {
            log::debug!("base step {step}: loss {:.4} rate {:.4} bpp dist {:.6}", record.loss, record.rate, record.distortion);
        }
        log.records.push(record);
    }
    Ok((codec, log))
}

/// Attach step diagnostics to a numeric failure.
pub(crate) fn step_abort(stage: &str, record: &StepRecord, err: Error) -> Error {
    match err {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!(
                "{stage} step {}: {context} (loss {}, rate {}, distortion {})",
                record.step, record.loss, record.rate, record.distortion
            ),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CodecConfig {
        CodecConfig {
            latent_channels: 4,
            hidden_channels: 8,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn shapes_follow_downsampling() {
        let codec = BaseCodec::new(small(), 1).unwrap();
        let x = Tensor::zeros([3, 32, 32]);
        let y = codec.analysis(&x).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
        assert!(y.is_finite());
        assert_eq!(codec.analysis(&x).unwrap(), y);
        assert_eq!(codec.synthesis(&y).unwrap().shape(), &[3, 32, 32]);
        assert!(codec.analysis(&Tensor::zeros([3, 20, 32])).is_err());
        assert!(codec.synthesis(&Tensor::zeros([5, 4, 4])).is_err());
    }

    #[test]
    fn eval_rounding_is_half_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::new([5], vec![0.4, -1.6, 2.5, -2.5, 0.5]).unwrap();
        assert_eq!(quantize(&y, QuantMode::Eval, &mut rng).data(), &[0.0, -2.0, 3.0, -3.0, 1.0]);
    }

    #[test]
    fn train_noise_stays_in_half_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::<f32>::randn([1000], &mut rng);
        let q = quantize(&y, QuantMode::Train, &mut rng);
        assert!(q.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() <= 0.5));
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig { beta: 0.0, ..small() }.validate().is_err());
        assert!(small().latent_shape(32, 20).is_err());
        assert_eq!(small().latent_shape(32, 16).unwrap(), [4, 4, 2]);
    }

    #[test]
    fn zero_steps_returns_the_initialisation() {
        let images = vec![Tensor::full([3, 16, 16], 0.5)];
        let (codec, log) = train_base(&images, &small(), &TrainOptions { steps: 0, seed: 3, ..TrainOptions::default() }).unwrap();
        assert_eq!(codec.params, BaseCodec::new(small(), 3).unwrap().params);
        assert!(log.records.is_empty());
        assert!(train_base(&[], &small(), &TrainOptions::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_keeps_hash() {
        let codec = BaseCodec::new(small(), 5).unwrap();
        let ck = Checkpoint::from_bytes(&codec.to_checkpoint(5, 0).unwrap().to_bytes().unwrap()).unwrap();
        let back = BaseCodec::from_checkpoint(&ck).unwrap();
        assert_eq!(back.model_hash(), codec.model_hash());
        assert_ne!(BaseCodec::new(small(), 6).unwrap().model_hash(), codec.model_hash());
    }
}
