//! The conditional latent denoiser `D(y_t, y_hat, t/T)`.
//!
//! A condition branch embeds the decoded latent `y_hat` with one unit. The
//! noisy latent enters a second stem, the two feature maps are concatenated
//! and merged, then `M` time-aware units and a zero-initialised output conv
//! predict a correction that is added to `y_hat`. A fresh network therefore
//! returns `y_hat` itself.
//!
//! The translator variant drops the noisy stem and the time input; it is the
//! single-pass ablation baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codec::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, TimeEmbedding, Unit, LEAKY_SLOPE, NORM_GROUPS};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub num_units: usize,
    pub channels: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            num_units: 2,
            channels: 64,
            time_embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self, latent_channels: usize) -> Result<()> {
        if self.num_units < 1 {
            return Err(Error::Config("the denoiser needs at least one unit".into()));
        }
        if self.channels < latent_channels {
            return Err(Error::Config(format!(
                "denoiser width {} is below the latent width {latent_channels}",
                self.channels
            )));
        }
        if !self.channels.is_multiple_of(NORM_GROUPS) {
            return Err(Error::Config(format!(
                "denoiser width {} must be a multiple of {NORM_GROUPS}",
                self.channels
            )));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time embedding width must be even".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    /// Full diffusion denoiser with noisy input and time conditioning.
    Conditional,
    /// Feed-forward `y_hat -> y~` translator.
    Translator,
}

impl DenoiserKind {
    pub fn prefix(self) -> &'static str {
        match self {
            DenoiserKind::Conditional => "denoiser",
            DenoiserKind::Translator => "translator",
        }
    }
}

#[derive(Clone, Debug)]
struct NoisyStem {
    time: TimeEmbedding,
    conv: Conv2d,
    merge: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub kind: DenoiserKind,
    pub latent_channels: usize,
    pub params: ParamStore,
    cond_in: Conv2d,
    cond_unit: Unit,
    noisy: Option<NoisyStem>,
    units: Vec<Unit>,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, kind: DenoiserKind, latent_channels: usize, seed: u64) -> Result<Self> {
        config.validate(latent_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let pre = kind.prefix();
        let ch = config.channels;
        let store = &mut params;
        let cond_in = Conv2d::new(store, &mut rng, &format!("{pre}.cond_in"), latent_channels, ch, 3, 1, 1);
        let cond_unit = Unit::new(store, &mut rng, &format!("{pre}.cond_unit"), ch, false);
        let noisy = (kind == DenoiserKind::Conditional).then(|| NoisyStem {
            time: TimeEmbedding::new(store, &mut rng, &format!("{pre}.time"), config.time_embed_dim, ch),
            conv: Conv2d::new(store, &mut rng, &format!("{pre}.noisy_in"), latent_channels, ch, 3, 1, 1),
            merge: Conv2d::new(store, &mut rng, &format!("{pre}.merge"), 2 * ch, ch, 1, 1, 0),
        });
        let time_aware = noisy.is_some();
        let units = (0..config.num_units)
            .map(|i| Unit::new(store, &mut rng, &format!("{pre}.unit{i}"), ch, time_aware))
            .collect();
        let conv_out = Conv2d::zeroed(store, &format!("{pre}.conv_out"), ch, latent_channels, 3, 1, 1);
        Ok(Denoiser {
            config,
            kind,
            latent_channels,
            params,
            cond_in,
            cond_unit,
            noisy,
            units,
            conv_out,
        })
    }

    /// Graph-level forward pass on `[N, C, h, w]` batches. `y_t` and
    /// `t_fracs` are ignored by the translator.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y_t: Option<Var>, y_hat: Var, t_fracs: &[f64]) -> Result<Var> {
        let shape = g.shape(y_hat).to_vec();
        if shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(Error::shape(format!(
                "expected [N, {}, h, w] latents, got {shape:?}",
                self.latent_channels
            )));
        }
        let cond = self.cond_in.forward(g, p, y_hat)?;
        let cond = self.cond_unit.forward(g, p, cond, None)?;
        let (mut h, temb) = match &self.noisy {
            None => (cond, None),
            Some(stem) => {
                let y_t = y_t.ok_or_else(|| Error::Contract("the conditional denoiser needs a noisy input".into()))?;
                if g.shape(y_t) != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "noisy latent {:?} does not match the condition {shape:?}",
                        g.shape(y_t)
                    )));
                }
                if t_fracs.len() != shape[0] {
                    return Err(Error::shape(format!(
                        "{} noise levels for a batch of {}",
                        t_fracs.len(),
                        shape[0]
                    )));
                }
                let temb = stem.time.forward(g, p, t_fracs)?;
                let x = stem.conv.forward(g, p, y_t)?;
                let both = g.concat_channels(x, cond)?;
                (stem.merge.forward(g, p, both)?, Some(temb))
            }
        };
        for unit in &self.units {
            h = unit.forward(g, p, h, temb)?;
        }
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let delta = self.conv_out.forward(g, p, h)?;
        g.add(y_hat, delta)
    }

    /// Tensor-level forward pass with frozen weights.
    pub fn predict(&self, y_t: Option<&Tensor>, y_hat: &Tensor, t_fracs: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let yt = y_t.map(|t| g.constant(t.clone()));
        let yh = g.constant(y_hat.clone());
        let out = self.forward(&mut g, &p, yt, yh, t_fracs)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let kind = serde_json::to_value(self.kind).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint::new(self.params.clone())
            .with_meta("denoiser_config", config)
            .with_meta("denoiser_kind", kind)
            .with_meta("latent_channels", self.latent_channels))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: DenoiserConfig = ckpt.meta_as("denoiser_config")?;
        let kind: DenoiserKind = ckpt.meta_as("denoiser_kind")?;
        let latent: usize = ckpt.meta_as("latent_channels")?;
        let mut d = Denoiser::new(config, kind, latent, 0)?;
        d.params.load_from(&ckpt.params)?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            num_units: 1,
            channels: 8,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn fresh_network_returns_the_condition() {
        let d = Denoiser::new(tiny(), DenoiserKind::Conditional, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y_hat = Tensor::<f32>::randn([2, 4, 3, 3], &mut rng);
        let y_t = Tensor::<f32>::randn([2, 4, 3, 3], &mut rng);
        let out = d.predict(Some(&y_t), &y_hat, &[0.2, 0.9]).unwrap();
        assert_eq!(out, y_hat);
    }

    #[test]
    fn config_checks() {
        assert!(tiny().validate(16).is_err());
        assert!(DenoiserConfig { num_units: 0, ..tiny() }.validate(4).is_err());
        assert!(DenoiserConfig { channels: 10, ..tiny() }.validate(4).is_err());
        assert!(DenoiserConfig::default().validate(32).is_ok());
    }

    #[test]
    fn conditional_needs_noisy_input_and_levels() {
        let d = Denoiser::new(tiny(), DenoiserKind::Conditional, 4, 0).unwrap();
        let y = Tensor::zeros([1, 4, 2, 2]);
        assert!(d.predict(None, &y, &[0.5]).is_err());
        assert!(d.predict(Some(&y), &y, &[0.5, 0.5]).is_err());
        assert!(d.predict(Some(&Tensor::zeros([1, 4, 2, 3])), &y, &[0.5]).is_err());
        let t = Denoiser::new(tiny(), DenoiserKind::Translator, 4, 0).unwrap();
        assert_eq!(t.predict(None, &y, &[]).unwrap(), y);
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = Denoiser::new(tiny(), DenoiserKind::Translator, 4, 7).unwrap();
        let back = Denoiser::from_checkpoint(&Checkpoint::from_bytes(&d.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.params, d.params);
        assert_eq!(back.kind, DenoiserKind::Translator);
        assert!(back.params.iter().all(|(n, _)| n.starts_with("translator.")));
    }
}
