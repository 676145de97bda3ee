//! Layers built on the autodiff [`Graph`].
//!
//! Layers own [`ParamId`]s into a [`ParamStore`] and evaluate against a
//! [`Bound`] view of that store, so one set of weights can be bound as
//! trainable in one graph and frozen in another.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_GROUPS: usize = 4;
const NORM_EPS: f64 = 1e-5;

/// Kaiming-uniform initialisation for a leaky-ReLU network.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = kaiming_uniform([cout, cin, k, k], cin * k * k, rng);
        Conv2d {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
            stride,
            pad,
        }
    }

    /// Same as [`Conv2d::new`] with an all-zero kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            weight: store.add(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight], self.stride, self.pad)?;
        g.add_channel(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        // Each output pixel sees roughly cin * k^2 / stride^2 taps.
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let w = kaiming_uniform([cin, cout, k, k], fan_in, rng);
        ConvTranspose2d {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv_transpose2d(x, p[self.weight], self.stride, self.pad)?;
        g.add_channel(y, p[self.bias])
    }
}

/// `x: [N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), kaiming_uniform([din, dout], din, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dout])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight], false, false)?;
        g.add_channel(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            groups: NORM_GROUPS,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.group_norm(x, p[self.gamma], p[self.beta], self.groups, NORM_EPS)
    }
}

/// Sinusoidal embedding of a noise level in `[0, 1]`, shape `[dim]`.
pub fn sinusoidal_embedding<T: Scalar>(t_frac: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    // Spread [0, 1] over the usual integer-timestep frequency range.
    let pos = 1000.0 * t_frac;
    Tensor::from_fn([dim], |i| {
        let j = i % half.max(1);
        let freq = (-(10000f64.ln()) * j as f64 / half.max(1) as f64).exp();
        let v = if i < half { (pos * freq).sin() } else { (pos * freq).cos() };
        T::from_f64(v)
    })
}

/// Sinusoidal features followed by two dense layers.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        channels: usize,
    ) -> Self {
        TimeEmbedding {
            dim,
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, channels),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), channels, channels),
        }
    }

    /// One noise level per batch item -> `[N, channels]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, t_fracs: &[f64]) -> Result<Var> {
        let rows: Vec<Tensor<T>> = t_fracs
            .iter()
            .map(|&t| sinusoidal_embedding(t, self.dim))
            .collect();
        let e = g.constant(Tensor::stack(&rows)?);
        let h = self.fc1.forward(g, p, e)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.fc2.forward(g, p, h)
    }
}

/// Residual block `x + f(norm(x) + proj(t))` with `f = conv, leaky-ReLU, conv`.
///
/// The last convolution starts at zero so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm: GroupNorm,
    time_proj: Option<Linear>,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        time_aware: bool,
    ) -> Self {
        ResBlock {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels),
            time_proj: time_aware
                .then(|| Linear::new(store, rng, &format!("{name}.time_proj"), channels, channels)),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1),
            conv2: Conv2d::zeroed(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        t_embed: Option<Var>,
    ) -> Result<Var> {
        let mut h = self.norm.forward(g, p, x)?;
        if let (Some(proj), Some(t)) = (&self.time_proj, t_embed) {
            let te = proj.forward(g, p, t)?;
            h = g.add_batch_channel(h, te)?;
        }
        let h = self.conv1.forward(g, p, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Single-head self-attention over spatial positions with a residual path.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
}

impl AttentionBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        let mut conv = |n: &str| Conv2d::new(store, rng, &format!("{name}.{n}"), channels, channels, 1, 1, 0);
        AttentionBlock {
            q: conv("q"),
            k: conv("k"),
            v: conv("v"),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, x)?.0)
    }

    /// Returns the block output and the `[N, L, L]` attention matrix (rows
    /// index queries).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let l: usize = shape[2..].iter().product();
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let q = g.reshape(q, &[n, c, l])?;
        let k = g.reshape(k, &[n, c, l])?;
        let v = g.reshape(v, &[n, c, l])?;
        let scores = g.matmul(q, k, true, false)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax(scores);
        let out = g.matmul(v, attn, false, true)?;
        let out = g.reshape(out, &shape)?;
        Ok((g.add(x, out)?, attn))
    }
}

/// Two residual blocks followed by attention.
#[derive(Clone, Debug)]
pub struct Unit {
    res1: ResBlock,
    res2: ResBlock,
    attn: AttentionBlock,
}

impl Unit {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        time_aware: bool,
    ) -> Self {
        Unit {
            res1: ResBlock::new(store, rng, &format!("{name}.res1"), channels, time_aware),
            res2: ResBlock::new(store, rng, &format!("{name}.res2"), channels, time_aware),
            attn: AttentionBlock::new(store, rng, &format!("{name}.attn"), channels),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        t_embed: Option<Var>,
    ) -> Result<Var> {
        let h = self.res1.forward(g, p, x, t_embed)?;
        let h = self.res2.forward(g, p, h, t_embed)?;
        self.attn.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_identity_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn([2, 1, 5, 5], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let one = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let y = g.conv2d(xv, one, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);

        let zero = g.constant(Tensor::zeros([4, 1, 3, 3]));
        let z = g.conv2d(xv, zero, 1, 1).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_with_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn([1, 3, 4, 4], &mut rng);
        let mut eye = Tensor::zeros([3, 3, 1, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(eye));
        let y = g.conv_transpose2d(xv, wv, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn attention_single_position_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, &mut rng, "attn", 4);
        let x = Tensor::<f64>::randn([2, 4, 1, 1], &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (out, attn) = block.forward_with_weights(&mut g, &p, xv).unwrap();
        assert!(g.value(attn).data().iter().all(|&w| w == 1.0));
        let v = block.v.forward(&mut g, &p, xv).unwrap();
        let expect = x.zip_map(g.value(v), |a, b| a + b).unwrap();
        assert!(g.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, &mut rng, "attn", 8);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(Tensor::randn([2, 8, 3, 4], &mut rng));
        let (out, attn) = block.forward_with_weights(&mut g, &p, xv).unwrap();
        assert_eq!(g.shape(out), &[2, 8, 3, 4]);
        for row in g.value(attn).data().chunks(12) {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    /// Dense O(L^2) evaluation of the attention block.
    #[test]
    fn attention_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, &mut rng, "attn", c);
        // Give the biases non-zero values too.
        for t in store.tensors_mut() {
            if t.rank() == 1 {
                *t = Tensor::randn(t.shape(), &mut rng);
            }
        }
        let x = Tensor::<f64>::randn([1, c, 2, 3], &mut rng);
        let l = 6;
        let proj = |conv: &Conv2d| -> Vec<Vec<f64>> {
            let w = store.get(conv.weight).data();
            let b = store.get(conv.bias).data();
            (0..c)
                .map(|o| {
                    (0..l)
                        .map(|pos| b[o] + (0..c).map(|i| w[o * c + i] * x.data()[i * l + pos]).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(&block.q), proj(&block.k), proj(&block.v));
        let mut expect = x.clone();
        for i in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|j| (0..c).map(|ch| q[ch][i] * k[ch][j]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|s| (s - m).exp()).sum();
            for ch in 0..c {
                let acc: f64 = (0..l).map(|j| (logits[j] - m).exp() / z * v[ch][j]).sum();
                expect.data_mut()[ch * l + i] += acc;
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x);
        let out = block.forward(&mut g, &p, xv).unwrap();
        assert!(g.value(out).max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn resblock_is_identity_at_init_and_time_sensitive_when_trained() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let temb = TimeEmbedding::new(&mut store, &mut rng, "temb", 32, 8);
        let block = ResBlock::new(&mut store, &mut rng, "res", 8, true);
        let x = Tensor::<f64>::randn([1, 8, 4, 4], &mut rng);

        let run = |store: &ParamStore<f64>, t: f64| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let e = temb.forward(&mut g, &p, &[t]).unwrap();
            let y = block.forward(&mut g, &p, xv, Some(e)).unwrap();
            g.value(y).clone()
        };
        let y0 = run(&store, 0.2);
        assert_eq!(y0.shape(), &[1, 8, 4, 4]);
        assert_eq!(y0, x);

        let w = store.get_mut(block.conv2.weight);
        *w = Tensor::randn(w.shape(), &mut rng);
        let (a, b) = (run(&store, 0.2), run(&store, 0.7));
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding::<f64>(0.0, 32);
        let b = sinusoidal_embedding::<f64>(1.0, 32);
        assert!(a.data().iter().chain(b.data()).all(|v| v.abs() <= 1.0));
        assert!(a.max_abs_diff(&b) > 0.1);
    }
}
