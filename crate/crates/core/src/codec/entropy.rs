//! Factorized entropy model: one discretized Gaussian per latent channel.

use crate::autograd::{normal_cdf, Graph, Var, LIKELIHOOD_BOUND};
use crate::codec::range::{CdfTable, TOTAL};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Smallest codable symbol.
pub const SYMBOL_MIN: i32 = -64;
/// Largest codable symbol.
pub const SYMBOL_MAX: i32 = 63;
pub const ALPHABET: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;

#[derive(Clone, Debug)]
pub struct EntropyModel {
    pub mean: ParamId,
    pub log_scale: ParamId,
}

impl EntropyModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        EntropyModel {
            mean: store.add(format!("{prefix}.mean"), Tensor::zeros([channels])),
            log_scale: store.add(format!("{prefix}.log_scale"), Tensor::full([channels], T::from_f64(2f64.ln()))),
        }
    }

    /// Per-element bits of `y` (`[N, C, H, W]`) as a graph node.
    pub fn bits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> Result<Var> {
        g.gaussian_bits(y, p[self.mean], p[self.log_scale])
    }

    /// Frozen `(mean, scale)` of every channel.
    pub fn snapshot<T: Scalar>(&self, store: &ParamStore<T>) -> ChannelGaussians {
        let means = store.get(self.mean).data().iter().map(|v| v.to_f64_lossy()).collect();
        let scales = store
            .get(self.log_scale)
            .data()
            .iter()
            .map(|v| v.to_f64_lossy().exp())
            .collect();
        ChannelGaussians { means, scales }
    }
}

/// Per-channel Gaussian parameters used to code one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGaussians {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl ChannelGaussians {
    pub fn validate(&self) -> Result<()> {
        if self.means.len() != self.scales.len() {
            return Err(Error::shape(format!(
                "{} means but {} scales",
                self.means.len(),
                self.scales.len()
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("entropy model scale must be positive, got {s}")));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::non_finite("entropy model means"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    /// Probability of every symbol in `[SYMBOL_MIN, SYMBOL_MAX]`; the two edge
    /// symbols also carry the tails beyond them.
    pub fn pmf(&self, channel: usize) -> Vec<f64> {
        let (mu, s) = (self.means[channel], self.scales[channel]);
        let cdf = |x: f64| normal_cdf((x - mu) / s);
        (SYMBOL_MIN..=SYMBOL_MAX)
            .map(|v| {
                let lo = if v == SYMBOL_MIN { 0.0 } else { cdf(v as f64 - 0.5) };
                let hi = if v == SYMBOL_MAX { 1.0 } else { cdf(v as f64 + 0.5) };
                (hi - lo).max(0.0)
            })
            .collect()
    }

    pub fn tables(&self) -> Result<Vec<CdfTable>> {
        self.validate()?;
        (0..self.channels()).map(|c| CdfTable::from_pmf(&self.pmf(c))).collect()
    }
}

/// Estimated code length in bits of integer symbols laid out as `[C, ...]`:
/// `sum -log2 P(s)` with `P` the channel pmf the coder uses (edge bins carry
/// the tails), floored at the smallest probability the coder can represent.
pub fn rate_estimate(symbols: &[i32], channels: usize, model: &ChannelGaussians) -> Result<f64> {
    model.validate()?;
    if model.channels() != channels || channels == 0 || !symbols.len().is_multiple_of(channels) {
        return Err(Error::shape(format!(
            "{} symbols do not split into the model's {} channels",
            symbols.len(),
            model.channels()
        )));
    }
    if let Some(s) = symbols.iter().find(|s| !(SYMBOL_MIN..=SYMBOL_MAX).contains(*s)) {
        return Err(Error::Domain(format!("symbol {s} outside the coded alphabet")));
    }
    let floor = 1.0 / f64::from(TOTAL);
    let per = symbols.len() / channels;
    let pmfs: Vec<Vec<f64>> = (0..channels).map(|c| model.pmf(c)).collect();
    Ok(symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| -pmfs[i / per][(s - SYMBOL_MIN) as usize].max(floor).log2())
        .sum())
}

/// `-log2` of the Gaussian mass of the unit bin around `v`, floored like the
/// training loss.
pub fn symbol_bits(v: f64, mean: f64, scale: f64) -> f64 {
    // Lower-tail evaluation; the bin mass is symmetric about the mean.
    let d = -(v - mean).abs();
    let p = normal_cdf((d + 0.5) / scale) - normal_cdf((d - 0.5) / scale);
    -p.max(LIKELIHOOD_BOUND).log2()
}
