//! Plug-in latent fusion on top of a frozen base codec.
//!
//! Training runs in two stages after the base codec. An auxiliary encoder
//! `g'_a` learns perception-oriented target latents against the frozen
//! decoder. A conditional denoiser `D` then learns to map noisy latents plus
//! the decoded `y_hat` to those targets. At decode time a DDIM sampler blends
//! the denoiser's predictions with `y_hat` under the user weight `τ`; the
//! bitstream never changes.

pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::codec::bitstream::hex;
use crate::codec::{Analysis, BaseCodec, Checkpoint, CodecConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use denoiser::{Denoiser, DenoiserConfig, DenoiserKind};
pub use sampler::{
    ancestral_step, ddim_step_tau, decode_controlled, decode_variant1, linear_fusion, predict_noise, sample,
    timestep_grid, translate_variant1, SamplerConfig,
};
pub use schedule::{forward_noise, make_schedule, NoiseSchedule, ScheduleParams};
pub use train::{train_aux_encoder, train_fusion, train_variant1, FusionOptions};

/// Name prefix of the auxiliary encoder's tensors.
pub const AUX_PREFIX: &str = "aux_encoder";

fn parse_hash(s: &str) -> Result<[u8; 8]> {
    let bad = || Error::Format(format!("malformed model hash {s:?}"));
    if s.len() != 16 || !s.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 8];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn to_json<V: serde::Serialize>(v: &V) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    let found: String = ckpt.meta_as("kind")?;
    if found != kind {
        return Err(Error::Format(format!("expected a {kind} checkpoint, found {found}")));
    }
    Ok(())
}

/// Encoder with the architecture of `g_a`, trained for perceptual targets.
#[derive(Clone, Debug)]
pub struct AuxEncoder {
    pub config: CodecConfig,
    pub params: ParamStore,
    pub g_a: Analysis,
    /// Model hash of the base codec this encoder was derived from.
    pub base_hash: [u8; 8],
}

impl AuxEncoder {
    fn empty(config: CodecConfig, base_hash: [u8; 8]) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g_a = Analysis::new(&mut params, &mut rng, AUX_PREFIX, &config);
        AuxEncoder {
            config,
            params,
            g_a,
            base_hash,
        }
    }

    /// Copy of the base encoder's weights under the auxiliary prefix.
    pub fn from_base(base: &BaseCodec) -> Result<Self> {
        let mut aux = AuxEncoder::empty(base.config.clone(), base.model_hash());
        aux.params
            .load_from(&base.params.strip_prefix("g_a.").prefixed(&format!("{AUX_PREFIX}.")))?;
        Ok(aux)
    }

    /// Unquantized `g'_a` on a `[N, 3, H, W]` batch.
    pub fn analysis_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.g_a.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(self.params.clone())
            .with_meta("kind", "aux")
            .with_meta("codec_config", to_json(&self.config)?)
            .with_meta("base_hash", hex(&self.base_hash)))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, "aux")?;
        let config: CodecConfig = ckpt.meta_as("codec_config")?;
        let hash: String = ckpt.meta_as("base_hash")?;
        let mut aux = AuxEncoder::empty(config, parse_hash(&hash)?);
        aux.params.load_from(&ckpt.params)?;
        Ok(aux)
    }
}

/// Trained denoiser plus the schedule it was trained with.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub denoiser: Denoiser,
    pub schedule_params: ScheduleParams,
    pub schedule: NoiseSchedule,
    pub lambda: f64,
    pub base_hash: [u8; 8],
}

impl FusionModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(self
            .denoiser
            .to_checkpoint()?
            .with_meta("kind", "fusion")
            .with_meta("schedule", to_json(&self.schedule_params)?)
            .with_meta("lambda", self.lambda)
            .with_meta("base_hash", hex(&self.base_hash)))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, "fusion")?;
        let schedule_params: ScheduleParams = ckpt.meta_as("schedule")?;
        let hash: String = ckpt.meta_as("base_hash")?;
        Ok(FusionModel {
            denoiser: Denoiser::from_checkpoint(ckpt)?,
            schedule: schedule_params.build()?,
            schedule_params,
            lambda: ckpt.meta_as("lambda")?,
            base_hash: parse_hash(&hash)?,
        })
    }
}

/// Translator baseline bundled with the hash of its base codec.
#[derive(Clone, Debug)]
pub struct Variant1Model {
    pub translator: Denoiser,
    pub base_hash: [u8; 8],
}

impl Variant1Model {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(self
            .translator
            .to_checkpoint()?
            .with_meta("kind", "variant1")
            .with_meta("base_hash", hex(&self.base_hash)))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, "variant1")?;
        let hash: String = ckpt.meta_as("base_hash")?;
        Ok(Variant1Model {
            translator: Denoiser::from_checkpoint(ckpt)?,
            base_hash: parse_hash(&hash)?,
        })
    }
}
