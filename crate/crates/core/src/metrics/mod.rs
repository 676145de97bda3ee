//! Distortion and perception measurements.
//!
//! Images are `[C, H, W]` tensors with values nominally in `[0, 1]`.

mod bd;
mod perceptual;

pub use bd::{bd_rate, QualityField, RdCurve, RdPoint};
pub use perceptual::{pdist, PerceptualProxy, PDIST_SEED};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned by [`psnr`] for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.expect_same_shape(y)?;
    let n = x.numel().max(1) as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// ITU-R BT.601 luma of a `[3, H, W]` image; `[1, H, W]` passes through.
pub fn luma(img: &Tensor) -> Result<Vec<f64>> {
    match *img.shape() {
        [1, _, _] => Ok(img.data().iter().map(|&v| v as f64).collect()),
        [3, h, w] => {
            let plane = h * w;
            let d = img.data();
            Ok((0..plane)
                .map(|i| 0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64)
                .collect())
        }
        _ => Err(Error::shape(format!(
            "expected a [1|3, H, W] image, got {:?}",
            img.shape()
        ))),
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma with an 11x11 Gaussian window (sigma 1.5) and
/// unit dynamic range.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.expect_same_shape(y)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (a, b) = (luma(x)?, luma(y)?);
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let aa = filter_valid(&prod(&a, &a), h, w, &k);
    let bb = filter_valid(&prod(&b, &b), h, w, &k);
    let ab = filter_valid(&prod(&a, &b), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, c: usize, s: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform([c, s, s], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn psnr_cap_and_formula() {
        let x = image(1, 3, 8);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        let a = Tensor::full([1, 2, 2], 0.5);
        let b = Tensor::full([1, 2, 2], 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let (x, y) = (image(2, 3, 9), image(3, 3, 9));
        let mut acc = 0.0f64;
        for i in 0..x.numel() {
            let d = x.data()[i] as f64 - y.data()[i] as f64;
            acc += d * d;
        }
        let oracle = 10.0 * (1.0 / (acc / x.numel() as f64)).log10();
        assert!((psnr(&x, &y, 1.0).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        assert!(psnr(&image(1, 3, 8), &image(1, 1, 8), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let x = image(4, 3, 16);
        let y = image(5, 3, 16);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-9);
        assert!(ssim(&x, &y).unwrap() < 1.0);

        let binary = Tensor::from_fn([1, 16, 16], |i| if (i / 16 + i % 16) % 3 == 0 { 1.0 } else { 0.0 });
        let inverted = binary.map(|v| 1.0 - v);
        assert!(ssim(&binary, &inverted).unwrap() < 0.5);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let x = image(6, 1, 10);
        assert!(matches!(ssim(&x, &x), Err(Error::InvalidShape(_))));
    }
}
