//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated; node ids are
//! assigned in creation order, so the tape is already topologically sorted
//! and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel { x: Var, bias: Var },
    AddBatchChannel { x: Var, e: Var },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    LeakyRelu { x: Var, slope: f64 },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    Softmax(Var),
    Reshape(Var),
    ConcatChannels(Var, Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    ChannelNormalize { x: Var, eps: f64 },
    GaussianBits { y: Var, mean: Var, log_scale: Var },
    RoundSte(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn channels_of(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("expected [N, C, ...], got {shape:?}")));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

/// Split a matmul operand into `(batch, rows, cols)`.
fn mat_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(Error::shape(format!("matmul operand must be rank 2 or 3, got {shape:?}"))),
    }
}

const LN2: f64 = std::f64::consts::LN_2;
/// Lower bound on a symbol probability inside [`Graph::gaussian_bits`].
pub const LIKELIHOOD_BOUND: f64 = 1e-9;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability mass of `[v - 0.5, v + 0.5]` under `N(0, scale^2)` with its
/// partial derivatives `(p, dp/dv, dp/dscale)`.
pub(crate) fn interval_mass(v: f64, scale: f64) -> (f64, f64, f64) {
    // Evaluate on the lower tail for accuracy; the mass is symmetric in v.
    let sign = if v > 0.0 { -1.0 } else { 1.0 };
    let u = (sign * v + 0.5) / scale;
    let l = (sign * v - 0.5) / scale;
    let p = normal_cdf(u) - normal_cdf(l);
    let (pu, pl) = (normal_pdf(u), normal_pdf(l));
    let dv = sign * (pu - pl) / scale;
    let ds = -(u * pu - l * pl) / scale;
    (p, dv, ds)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf whose gradient will be reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// `x: [N, C, ...] + bias: [C]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, inner) = channels_of(self.shape(x))?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "bias {:?} does not match {c} channels",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % c];
        }
        Ok(self.push(out, Op::AddChannel { x, bias }, &[x, bias]))
    }

    /// `x: [N, C, ...] + e: [N, C]`, broadcast over trailing axes.
    pub fn add_batch_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (n, c, inner) = channels_of(self.shape(x))?;
        if self.shape(e) != [n, c] {
            return Err(Error::shape(format!(
                "embedding {:?} does not match [{n}, {c}]",
                self.shape(e)
            )));
        }
        let ev = self.value(e).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += ev[i / inner];
        }
        Ok(self.push(out, Op::AddBatchChannel { x, e }, &[x, e]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, stride, pad }, &[x, w]))
    }

    /// Batched matrix product `op(a) * op(b)` where `op` optionally transposes
    /// the trailing two axes. Rank-2 operands are treated as a batch of one.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ba, ra, ca) = mat_dims(self.shape(a))?;
        let (bb, rb, cb) = mat_dims(self.shape(b))?;
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ba != bb || ka != kb {
            return Err(Error::shape(format!(
                "matmul {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" }
            )));
        }
        let rank3 = self.shape(a).len() == 3;
        let mut out = if rank3 {
            Tensor::zeros([ba, m, n])
        } else {
            Tensor::zeros([m, n])
        };
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..ba {
                let am = MatRef::new(&av[i * ra * ca..(i + 1) * ra * ca], ra, ca).maybe_t(ta);
                let bm = MatRef::new(&bv[i * rb * cb..(i + 1) * rb * cb], rb, cb).maybe_t(tb);
                gemm(am, bm, &mut out.data_mut()[i * m * n..(i + 1) * m * n], false);
            }
        }
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (n, c, inner) = channels_of(self.shape(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group norm affine parameters must be [C]"));
        }
        let cg = c / groups;
        let glen = cg * inner;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(self.shape(x));
        let mut stats = Vec::with_capacity(n * groups);
        for gi in 0..n * groups {
            let seg = &xv[gi * glen..(gi + 1) * glen];
            let mean = seg.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / glen as f64;
            let var = seg
                .iter()
                .map(|v| (v.to_f64_lossy() - mean).powi(2))
                .sum::<f64>()
                / glen as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            let o = &mut out.data_mut()[gi * glen..(gi + 1) * glen];
            for (j, (ov, xvj)) in o.iter_mut().zip(seg).enumerate() {
                let ch = (gi % groups) * cg + j / inner;
                let xhat = (xvj.to_f64_lossy() - mean) * rstd;
                *ov = T::from_f64(xhat) * gv[ch] + bv[ch];
            }
        }
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenate `[N, Ca, ...]` and `[N, Cb, ...]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!("cannot concatenate {sa:?} and {sb:?} on channels")));
        }
        let inner: usize = sa[2..].iter().product();
        let (la, lb) = (sa[1] * inner, sb[1] * inner);
        let mut data = Vec::with_capacity(sa[0] * (la + lb));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..sa[0] {
            data.extend_from_slice(&av[i * la..(i + 1) * la]);
            data.extend_from_slice(&bv[i * lb..(i + 1) * lb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_f64(v.numel() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// Mean squared difference of two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Scale every `[N, :, ...]` fibre to unit L2 norm along the channel axis.
    pub fn channel_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, inner) = channels_of(self.shape(x))?;
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for b in 0..n {
            for p in 0..inner {
                let base = b * c * inner + p;
                let ss: f64 = (0..c).map(|ch| data[base + ch * inner].to_f64_lossy().powi(2)).sum();
                let r = T::from_f64(1.0 / (ss + eps).sqrt());
                for ch in 0..c {
                    data[base + ch * inner] *= r;
                }
            }
        }
        Ok(self.push(out, Op::ChannelNormalize { x, eps }, &[x]))
    }

    /// Per-element code length in bits of `y` under a per-channel Gaussian
    /// integrated over unit-width bins: `-log2 P(y)` with
    /// `P(y) = Phi((y - mu + 1/2) / s) - Phi((y - mu - 1/2) / s)` and
    /// `s = exp(log_scale)`.
    pub fn gaussian_bits(&mut self, y: Var, mean: Var, log_scale: Var) -> Result<Var> {
        let (_, c, inner) = channels_of(self.shape(y))?;
        if self.shape(mean) != [c] || self.shape(log_scale) != [c] {
            return Err(Error::shape(format!(
                "entropy model parameters must be [{c}], got {:?} and {:?}",
                self.shape(mean),
                self.shape(log_scale)
            )));
        }
        let mu = self.value(mean).data();
        let ls = self.value(log_scale).data();
        let out = Tensor::from_fn(self.shape(y), |i| {
            let ch = (i / inner) % c;
            let v = self.value(y).data()[i].to_f64_lossy() - mu[ch].to_f64_lossy();
            let (p, _, _) = interval_mass(v, ls[ch].to_f64_lossy().exp());
            T::from_f64(-p.max(LIKELIHOOD_BOUND).log2())
        });
        Ok(self.push(out, Op::GaussianBits { y, mean, log_scale }, &[y, mean, log_scale]))
    }

    /// Rounds half away from zero; the backward pass is the identity.
    pub fn round_ste(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.round());
        self.push(out, Op::RoundSte(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::non_finite("loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads)?;
            // Interior gradients are no longer needed; keep only leaves.
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::non_finite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, d: Tensor<T>| accumulate(grads, v, d);
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.wants(a) {
                    acc(a, g.clone());
                }
                if self.wants(b) {
                    acc(b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(a, g.clone());
                }
                if self.wants(b) {
                    acc(b, g.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    acc(a, g.zip_map(self.value(b), |d, y| d * y)?);
                }
                if self.wants(b) {
                    acc(b, g.zip_map(self.value(a), |d, x| d * x)?);
                }
            }
            &Op::Scale(x, f) => {
                let f = T::from_f64(f);
                acc(x, g.map(|d| d * f));
            }
            &Op::AddChannel { x, bias } => {
                if self.wants(x) {
                    acc(x, g.clone());
                }
                if self.wants(bias) {
                    let (_, c, inner) = channels_of(g.shape())?;
                    let mut db = Tensor::zeros([c]);
                    for (i, &d) in g.data().iter().enumerate() {
                        db.data_mut()[(i / inner) % c] += d;
                    }
                    acc(bias, db);
                }
            }
            &Op::AddBatchChannel { x, e } => {
                if self.wants(x) {
                    acc(x, g.clone());
                }
                if self.wants(e) {
                    let (n, c, inner) = channels_of(g.shape())?;
                    let mut de = Tensor::zeros([n, c]);
                    for (i, &d) in g.data().iter().enumerate() {
                        de.data_mut()[i / inner] += d;
                    }
                    acc(e, de);
                }
            }
            &Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    self.wants(x),
                    self.wants(w),
                )?;
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                if let Some(dw) = dw {
                    acc(w, dw);
                }
            }
            &Op::ConvTranspose2d { x, w, stride, pad } => {
                let (dx, dw) = kernels::conv_transpose2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    self.wants(x),
                    self.wants(w),
                )?;
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                if let Some(dw) = dw {
                    acc(w, dw);
                }
            }
            &Op::MatMul { a, b, ta, tb } => {
                let (ba, ra, ca) = mat_dims(self.shape(a))?;
                let (_, rb, cb) = mat_dims(self.shape(b))?;
                let (_, m, n) = mat_dims(g.shape())?;
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let mut da = self.wants(a).then(|| Tensor::zeros(self.shape(a)));
                let mut db = self.wants(b).then(|| Tensor::zeros(self.shape(b)));
                for i in 0..ba {
                    let gm = MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n);
                    let am = MatRef::new(&av[i * ra * ca..(i + 1) * ra * ca], ra, ca);
                    let bm = MatRef::new(&bv[i * rb * cb..(i + 1) * rb * cb], rb, cb);
                    if let Some(da) = da.as_mut() {
                        let out = &mut da.data_mut()[i * ra * ca..(i + 1) * ra * ca];
                        // d op(A) = G op(B)^T
                        if ta {
                            gemm(bm.maybe_t(tb), gm.t(), out, false);
                        } else {
                            gemm(gm, bm.maybe_t(tb).t(), out, false);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let out = &mut db.data_mut()[i * rb * cb..(i + 1) * rb * cb];
                        // d op(B) = op(A)^T G
                        if tb {
                            gemm(gm.t(), am.maybe_t(ta), out, false);
                        } else {
                            gemm(am.maybe_t(ta).t(), gm, out, false);
                        }
                    }
                }
                if let Some(da) = da {
                    acc(a, da);
                }
                if let Some(db) = db {
                    acc(b, db);
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let s = T::from_f64(slope);
                acc(
                    x,
                    g.zip_map(self.value(x), |d, v| if v > T::zero() { d } else { d * s })?,
                );
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let (n, c, inner) = channels_of(self.shape(x))?;
                let cg = c / groups;
                let glen = cg * inner;
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let mut dx = Tensor::zeros(self.shape(x));
                let mut dgamma = Tensor::zeros([c]);
                let mut dbeta = Tensor::zeros([c]);
                let mut dxhat = vec![0.0f64; glen];
                let mut xhat = vec![0.0f64; glen];
                for gi in 0..n * groups {
                    let (mean, rstd) = stats[gi];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..glen {
                        let ch = (gi % groups) * cg + j / inner;
                        let d = g.data()[gi * glen + j];
                        xhat[j] = (xv[gi * glen + j].to_f64_lossy() - mean) * rstd;
                        dgamma.data_mut()[ch] += d * T::from_f64(xhat[j]);
                        dbeta.data_mut()[ch] += d;
                        dxhat[j] = (d * gv[ch]).to_f64_lossy();
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= glen as f64;
                    mean_dxhat_xhat /= glen as f64;
                    for j in 0..glen {
                        dx.data_mut()[gi * glen + j] =
                            T::from_f64(rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
                    }
                }
                if self.wants(x) {
                    acc(x, dx);
                }
                if self.wants(gamma) {
                    acc(gamma, dgamma);
                }
                if self.wants(beta) {
                    acc(beta, dbeta);
                }
            }
            &Op::Softmax(x) => {
                let y = &self.nodes[id].value;
                let d = *y.shape().last().unwrap_or(&1);
                let mut dx = Tensor::zeros(y.shape());
                for ((dxr, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(x, dx);
            }
            &Op::Reshape(x) => {
                acc(x, g.clone().reshape(self.shape(x))?);
            }
            &Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let inner: usize = sa[2..].iter().product();
                let (la, lb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(sa[0] * la);
                let mut db = Vec::with_capacity(sa[0] * lb);
                for chunk in g.data().chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                if self.wants(a) {
                    acc(a, Tensor::new(sa, da)?);
                }
                if self.wants(b) {
                    acc(b, Tensor::new(sb, db)?);
                }
            }
            &Op::Sum(x) => {
                acc(x, Tensor::full(self.shape(x), g.data()[0]));
            }
            &Op::Mean(x) => {
                let n = T::from_f64(self.value(x).numel() as f64);
                acc(x, Tensor::full(self.shape(x), g.data()[0] / n));
            }
            &Op::Square(x) => {
                let two = T::from_f64(2.0);
                acc(x, g.zip_map(self.value(x), |d, v| two * d * v)?);
            }
            &Op::ChannelNormalize { x, eps } => {
                let y = &self.nodes[id].value;
                let (n, c, inner) = channels_of(y.shape())?;
                let xv = self.value(x).data();
                let mut dx = Tensor::zeros(y.shape());
                for b in 0..n {
                    for p in 0..inner {
                        let idx = |ch: usize| b * c * inner + p + ch * inner;
                        let ss: f64 = (0..c).map(|ch| xv[idx(ch)].to_f64_lossy().powi(2)).sum();
                        let r = T::from_f64(1.0 / (ss + eps).sqrt());
                        let dot: T = (0..c).map(|ch| g.data()[idx(ch)] * y.data()[idx(ch)]).sum();
                        for ch in 0..c {
                            dx.data_mut()[idx(ch)] = r * (g.data()[idx(ch)] - y.data()[idx(ch)] * dot);
                        }
                    }
                }
                acc(x, dx);
            }
            &Op::GaussianBits { y, mean, log_scale } => {
                let (_, c, inner) = channels_of(self.shape(y))?;
                let yv = self.value(y).data();
                let mu = self.value(mean).data();
                let ls = self.value(log_scale).data();
                let mut dy = Tensor::zeros(self.shape(y));
                let mut dmu = Tensor::<T>::zeros([c]);
                let mut dls = Tensor::<T>::zeros([c]);
                for (i, &gd) in g.data().iter().enumerate() {
                    let ch = (i / inner) % c;
                    let scale = ls[ch].to_f64_lossy().exp();
                    let v = yv[i].to_f64_lossy() - mu[ch].to_f64_lossy();
                    let (p, dpdv, dpds) = interval_mass(v, scale);
                    // The bound passes gradient through so clamped symbols still
                    // pull the model toward covering them.
                    let coef = -gd.to_f64_lossy() / (p.max(LIKELIHOOD_BOUND) * LN2);
                    let dv = coef * dpdv;
                    dy.data_mut()[i] = T::from_f64(dv);
                    dmu.data_mut()[ch] -= T::from_f64(dv);
                    dls.data_mut()[ch] += T::from_f64(coef * dpds * scale);
                }
                if self.wants(y) {
                    acc(y, dy);
                }
                if self.wants(mean) {
                    acc(mean, dmu);
                }
                if self.wants(log_scale) {
                    acc(log_scale, dls);
                }
            }
            &Op::RoundSte(x) => acc(x, g.clone()),
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`; zero when `v` does not feed the loss.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}
