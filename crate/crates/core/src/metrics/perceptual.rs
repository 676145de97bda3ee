//! P-dist: a fixed random-feature perceptual distance.
//!
//! Both images go through the same three strided convolution stages
//! (16, 32 and 64 channels) with weights drawn from a fixed seed. At each
//! stage the feature vector at every position is scaled to unit length and the
//! squared difference, summed over channels and averaged over positions, is
//! accumulated. Unit-length features make the score sensitive to local
//! structure (edges, texture) rather than to raw intensity error.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, LEAKY_SLOPE};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Seed of the proxy network; recorded next to every reported score.
pub const PDIST_SEED: u64 = 7177;

const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
const FIRST_KERNEL: usize = 5;
const DEEP_KERNEL: usize = 3;
const NORM_EPS: f64 = 1e-10;
/// Side of the average-pooling window behind the colour anchor.
const POOL: usize = 4;
/// Weight of the pooled-colour MSE inside [`PerceptualProxy::training_loss_var`].
pub const COLOUR_WEIGHT: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct PerceptualProxy<T: Scalar = f32> {
    params: ParamStore<T>,
    stages: Vec<ParamId>,
    pool: ParamId,
}

/// First-stage filters: a random field smoothed by a 3x3 binomial, made
/// zero-mean and shared across colour channels with gains in `[0.5, 1]`.
/// Smooth luminance-like filters see edges and texture but average away
/// per-pixel colour noise.
fn first_stage<T: Scalar>(cout: usize, cin: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    const K: usize = FIRST_KERNEL;
    const BINOMIAL: [f64; 3] = [0.25, 0.5, 0.25];
    let field = Uniform::new_inclusive(-1.0f64, 1.0).expect("valid range");
    let gain = Uniform::new_inclusive(0.5f64, 1.0).expect("valid range");
    let fan_in = (cin * K * K) as f64;
    let mut data = Vec::with_capacity(cout * cin * K * K);
    for _ in 0..cout {
        let raw: Vec<f64> = (0..(K + 2) * (K + 2)).map(|_| field.sample(rng)).collect();
        let mut spatial: Vec<f64> = (0..K * K)
            .map(|i| {
                let (y, x) = (i / K, i % K);
                (0..9)
                    .map(|j| BINOMIAL[j / 3] * BINOMIAL[j % 3] * raw[(y + j / 3) * (K + 2) + x + j % 3])
                    .sum()
            })
            .collect();
        let mean = spatial.iter().sum::<f64>() / spatial.len() as f64;
        let norm = spatial.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        let target = (2.0 * K as f64 * K as f64 / fan_in).sqrt();
        spatial.iter_mut().for_each(|v| *v = (*v - mean) / norm * target);
        for _ in 0..cin {
            let g = gain.sample(rng);
            data.extend(spatial.iter().map(|&v| T::from_f64(v * g)));
        }
    }
    Tensor::new([cout, cin, K, K], data).expect("sizes agree")
}

/// Deeper stages: Kaiming-uniform filters with each filter made zero-mean.
fn deep_stage<T: Scalar>(cout: usize, cin: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in = cin * DEEP_KERNEL * DEEP_KERNEL;
    let mut w = kaiming_uniform::<T, _>([cout, cin, DEEP_KERNEL, DEEP_KERNEL], fan_in, rng);
    for f in w.data_mut().chunks_mut(fan_in) {
        let m = f.iter().copied().sum::<T>() / T::from_f64(fan_in as f64);
        f.iter_mut().for_each(|v| *v -= m);
    }
    w
}

impl<T: Scalar> PerceptualProxy<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        let stages = STAGE_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let w = if i == 0 {
                    first_stage(cout, cin, &mut rng)
                } else {
                    deep_stage(cout, cin, &mut rng)
                };
                cin = cout;
                params.add(format!("stage{i}.weight"), w)
            })
            .collect();
        let area = T::from_f64(1.0 / (POOL * POOL) as f64);
        let pool = params.add(
            "colour.pool",
            Tensor::from_fn([3, 3, POOL, POOL], |i| if i / (3 * POOL * POOL) == (i / (POOL * POOL)) % 3 { area } else { T::zero() }),
        );
        PerceptualProxy { params, stages, pool }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Bind the (always frozen) proxy weights onto a graph.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, false)
    }

    fn features(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("expected [N, C, H, W] images, got {shape:?}")));
        }
        let mut h = match shape[1] {
            3 => x,
            1 => {
                let two = g.concat_channels(x, x)?;
                g.concat_channels(two, x)?
            }
            c => return Err(Error::shape(format!("images must have 1 or 3 channels, got {c}"))),
        };
        // [0, 1] -> [-1, 1]; away from the border the offset vanishes under
        // zero-mean filters.
        h = g.scale(h, 2.0);
        let mut feats = Vec::with_capacity(self.stages.len());
        for &w in &self.stages {
            let pad = g.shape(p[w])[2] / 2;
            h = g.conv2d(h, p[w], 2, pad)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            feats.push(g.channel_normalize(h, NORM_EPS)?);
        }
        Ok(feats)
    }

    /// Differentiable distance between two `[N, C, H, W]` batches, averaged
    /// over the batch.
    pub fn distance_var(&self, g: &mut Graph<T>, p: &Bound, x: Var, y: Var) -> Result<Var> {
        if g.shape(x) != g.shape(y) {
            return Err(Error::shape(format!(
                "pdist inputs differ: {:?} vs {:?}",
                g.shape(x),
                g.shape(y)
            )));
        }
        let fx = self.features(g, p, x)?;
        let fy = self.features(g, p, y)?;
        let mut total: Option<Var> = None;
        for (a, b) in fx.into_iter().zip(fy) {
            let channels = g.shape(a)[1] as f64;
            // mean over all elements * channels = mean over positions of the
            // channel sum.
            let d = g.mse(a, b)?;
            let d = g.scale(d, channels);
            total = Some(match total {
                Some(t) => g.add(t, d)?,
                None => d,
            });
        }
        Ok(total.expect("at least one stage"))
    }

    /// Training objective for perception-oriented stages: the distance plus
    /// [`COLOUR_WEIGHT`] times the MSE between 4x4 average-pooled RGB images.
    ///
    /// Zero-mean filters and unit-length features make the distance blind
    /// to flat colour offsets. Optimising it alone lets colours drift out of
    /// gamut, so the pooled term pins low frequencies while leaving texture
    /// to the distance.
    pub fn training_loss_var(&self, g: &mut Graph<T>, p: &Bound, x: Var, y: Var) -> Result<Var> {
        let d = self.distance_var(g, p, x, y)?;
        if g.shape(x)[1] != 3 {
            return Ok(d);
        }
        let px = g.conv2d(x, p[self.pool], POOL, 0)?;
        let py = g.conv2d(y, p[self.pool], POOL, 0)?;
        let colour = g.mse(px, py)?;
        let colour = g.scale(colour, COLOUR_WEIGHT);
        g.add(d, colour)
    }

    /// Distance between two `[C, H, W]` images.
    pub fn distance(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
        x.expect_same_shape(y)?;
        let batch = |t: &Tensor<T>| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(s)
        };
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let xv = g.constant(batch(x)?);
        let yv = g.constant(batch(y)?);
        let d = self.distance_var(&mut g, &p, xv, yv)?;
        Ok(g.value(d).data()[0].to_f64_lossy().max(0.0))
    }
}

fn shared() -> &'static PerceptualProxy<f32> {
    static PROXY: OnceLock<PerceptualProxy<f32>> = OnceLock::new();
    PROXY.get_or_init(|| PerceptualProxy::new(PDIST_SEED))
}

/// P-dist between two `[C, H, W]` images using the canonical seed.
pub fn pdist(x: &Tensor, y: &Tensor) -> Result<f64> {
    shared().distance(x, y)
}
