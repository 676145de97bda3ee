//! Convolution kernels (im2col + GEMM) shared by the forward and backward passes.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Geometry of a square-kernel convolution mapping `[c, h, w]` to `[_, ho, wo]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        if k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::shape(format!(
                "kernel {k} does not fit {h}x{w} input with padding {pad}"
            )));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let n_out = g.col_cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ki as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let n_out = g.col_cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims4(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!(
            "{what} must be rank 4, got {:?}",
            t.shape()
        ))),
    }
}

/// Scratch buffer for the column matrix, skipped for pointwise kernels.
struct Cols<T> {
    buf: Vec<T>,
}

impl<T: Scalar> Cols<T> {
    fn new(g: &ConvGeom) -> Self {
        let len = if g.is_pointwise() {
            0
        } else {
            g.col_rows() * g.col_cols()
        };
        Cols {
            buf: vec![T::zero(); len],
        }
    }

    fn fill<'a>(&'a mut self, img: &'a [T], g: &ConvGeom) -> &'a [T] {
        if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut self.buf);
            &self.buf
        }
    }
}

/// `x: [n, c, h, w]`, `w: [o, c, k, k]` -> `[n, o, ho, wo]`.
pub(crate) fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, wd] = dims4(x, "conv2d input")?;
    let [o, wc, k, k2] = dims4(w, "conv2d kernel")?;
    if wc != c || k != k2 {
        return Err(Error::shape(format!(
            "conv2d kernel {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let g = ConvGeom::new(c, h, wd, k, stride, pad)?;
    let mut out = Tensor::zeros([n, o, g.ho, g.wo]);
    let mut cols = Cols::new(&g);
    let in_len = c * h * wd;
    let out_len = o * g.ho * g.wo;
    let wm = MatRef::new(w.data(), o, g.col_rows());
    for b in 0..n {
        let img = &x.data()[b * in_len..(b + 1) * in_len];
        let cm = cols.fill(img, &g);
        gemm(
            wm,
            MatRef::new(cm, g.col_rows(), g.col_cols()),
            &mut out.data_mut()[b * out_len..(b + 1) * out_len],
            false,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let [n, c, h, wd] = dims4(x, "conv2d input")?;
    let [o, _, k, _] = dims4(w, "conv2d kernel")?;
    let g = ConvGeom::new(c, h, wd, k, stride, pad)?;
    let in_len = c * h * wd;
    let out_len = o * g.ho * g.wo;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut cols = Cols::new(&g);
    let mut dcols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let wm = MatRef::new(w.data(), o, g.col_rows());
    for b in 0..n {
        let dyb = MatRef::new(&dy.data()[b * out_len..(b + 1) * out_len], o, g.col_cols());
        if let Some(dw) = dw.as_mut() {
            let img = &x.data()[b * in_len..(b + 1) * in_len];
            let cm = cols.fill(img, &g);
            gemm(
                dyb,
                MatRef::new(cm, g.col_rows(), g.col_cols()).t(),
                dw.data_mut(),
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx.data_mut()[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(wm.t(), dyb, dimg, false);
            } else {
                gemm(wm.t(), dyb, &mut dcols, false);
                col2im(&dcols, &g, dimg);
            }
        }
    }
    Ok((dx, dw))
}

/// Output spatial size of a transposed convolution.
pub(crate) fn conv_transpose_out(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    ((len.saturating_sub(1)) * stride + k)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0 && len > 0)
        .ok_or_else(|| {
            Error::shape(format!(
                "transposed convolution of length {len} with kernel {k}, stride {stride}, padding {pad} is empty"
            ))
        })
}

/// `x: [n, ci, h, w]`, `w: [ci, co, k, k]` -> `[n, co, ho, wo]`; the adjoint of
/// [`conv2d`] with the same kernel.
pub(crate) fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, ci, h, wd] = dims4(x, "conv_transpose2d input")?;
    let [wci, co, k, k2] = dims4(w, "conv_transpose2d kernel")?;
    if wci != ci || k != k2 {
        return Err(Error::shape(format!(
            "conv_transpose2d kernel {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    let ho = conv_transpose_out(h, k, stride, pad)?;
    let wo = conv_transpose_out(wd, k, stride, pad)?;
    // The forward convolution this is the adjoint of maps [co, ho, wo] -> [ci, h, wd].
    let g = ConvGeom::new(co, ho, wo, k, stride, pad)?;
    debug_assert_eq!((g.ho, g.wo), (h, wd));
    let in_len = ci * h * wd;
    let out_len = co * ho * wo;
    let mut out = Tensor::zeros([n, co, ho, wo]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let wm = MatRef::new(w.data(), ci, g.col_rows());
    for b in 0..n {
        let xb = MatRef::new(&x.data()[b * in_len..(b + 1) * in_len], ci, h * wd);
        let ob = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        if g.is_pointwise() {
            gemm(wm.t(), xb, ob, false);
        } else {
            gemm(wm.t(), xb, &mut cols, false);
            col2im(&cols, &g, ob);
        }
    }
    Ok(out)
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let [n, ci, h, wd] = dims4(x, "conv_transpose2d input")?;
    let [_, co, k, _] = dims4(w, "conv_transpose2d kernel")?;
    let [_, _, ho, wo] = dims4(dy, "conv_transpose2d output grad")?;
    let g = ConvGeom::new(co, ho, wo, k, stride, pad)?;
    let in_len = ci * h * wd;
    let out_len = co * ho * wo;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut cols = Cols::new(&g);
    let wm = MatRef::new(w.data(), ci, g.col_rows());
    for b in 0..n {
        let dimg = &dy.data()[b * out_len..(b + 1) * out_len];
        let cm = MatRef::new(cols.fill(dimg, &g), g.col_rows(), g.col_cols());
        if let Some(dx) = dx.as_mut() {
            gemm(wm, cm, &mut dx.data_mut()[b * in_len..(b + 1) * in_len], false);
        }
        if let Some(dw) = dw.as_mut() {
            let xb = MatRef::new(&x.data()[b * in_len..(b + 1) * in_len], ci, h * wd);
            gemm(xb, cm.t(), dw.data_mut(), true);
        }
    }
    Ok((dx, dw))
}
