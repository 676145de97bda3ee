use alf_core::metrics::{bd_rate, mse, pdist, psnr, QualityField, RdCurve};
use alf_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn textured(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = Tensor::<f32>::rand_uniform([3, 32, 32], 0.0, 1.0, &mut rng);
    Tensor::from_fn([3, 32, 32], |i| {
        let (y, x) = ((i / 32) % 32, i % 32);
        let checker = if (x / 4 + y / 4) % 2 == 0 { 0.7 } else { 0.3 };
        let wave = 0.15 * ((x as f32) * 0.9 + (y as f32) * 0.4).sin();
        checker + wave + 0.15 * (fine.data()[i] - 0.5)
    })
}

fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let at = |ch: usize, y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img.data()[(ch * h + y) * w + x] as f64
    };
    let mut tmp = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                tmp[(ch * h + y) * w + x] =
                    (-r..=r).map(|i| k[(i + r) as usize] * at(ch, y as isize, x as isize + i)).sum::<f64>() / ks;
            }
        }
    }
    Tensor::from_fn([c, h, w], |idx| {
        let (ch, y, x) = (idx / (h * w), (idx / w) % h, idx % w);
        let v: f64 = (-r..=r)
            .map(|i| {
                let yy = (y as isize + i).clamp(0, h as isize - 1) as usize;
                k[(i + r) as usize] * tmp[(ch * h + yy) * w + x]
            })
            .sum::<f64>()
            / ks;
        v as f32
    })
}

#[test]
fn pdist_penalises_blur_more_than_noise_at_matched_mse() {
    for seed in 0..5 {
        let x = textured(seed);
        let blurred = gaussian_blur(&x, 1.0);
        let target = mse(&x, &blurred).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = Tensor::<f32>::randn(x.shape(), &mut rng);
        let power = n.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / n.numel() as f64;
        let alpha = (target / power).sqrt() as f32;
        let noisy = x.zip_map(&n, |a, b| a + alpha * b).unwrap();
        assert!((mse(&x, &noisy).unwrap() - target).abs() / target < 1e-3);
        let (pb, pn) = (pdist(&x, &blurred).unwrap(), pdist(&x, &noisy).unwrap());
        assert!(pb > pn, "seed {seed}: blur {pb} vs noise {pn} at mse {target}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn psnr_falls_as_noise_grows(seed in 0u64..1000, a in 0.01f32..0.2, extra in 0.01f32..0.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::rand_uniform([1, 8, 8], 0.0, 1.0, &mut rng);
        let n = Tensor::<f32>::randn([1, 8, 8], &mut rng);
        let small = x.zip_map(&n, |p, q| p + a * q).unwrap();
        let large = x.zip_map(&n, |p, q| p + (a + extra) * q).unwrap();
        prop_assert!(psnr(&x, &small, 1.0).unwrap() > psnr(&x, &large, 1.0).unwrap());
    }

    #[test]
    fn pdist_is_symmetric_nonnegative_and_repeatable(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f32>::rand_uniform([3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::<f32>::rand_uniform([3, 16, 16], 0.0, 1.0, &mut rng);
        let d = pdist(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - pdist(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert_eq!(d, pdist(&a, &b).unwrap());
    }
}

/// Lagrange interpolation through four points (the unique cubic) followed by
/// trapezoidal integration on a fine grid.
fn trapezoid_bd(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> f64 {
    let lagrange = |pts: &[(f64, f64)], q: f64| -> f64 {
        (0..pts.len())
            .map(|i| {
                let mut term = pts[i].0.ln();
                for j in 0..pts.len() {
                    if i != j {
                        term *= (q - pts[j].1) / (pts[i].1 - pts[j].1);
                    }
                }
                term
            })
            .sum()
    };
    let range = |pts: &[(f64, f64)]| {
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (la, ha) = range(anchor);
    let (lt, ht) = range(test);
    let (lo, hi) = (la.max(lt), ha.min(ht));
    let steps = 20_000;
    let dq = (hi - lo) / steps as f64;
    let f = |q: f64| lagrange(test, q) - lagrange(anchor, q);
    let mut area = 0.5 * (f(lo) + f(hi));
    for i in 1..steps {
        area += f(lo + i as f64 * dq);
    }
    area *= dq;
    ((area / (hi - lo)).exp() - 1.0) * 100.0
}

#[test]
fn bd_rate_matches_trapezoidal_oracle() {
    let anchor = [(0.12, 27.1), (0.25, 29.8), (0.47, 32.4), (0.9, 34.9)];
    let test = [(0.10, 27.6), (0.21, 30.1), (0.43, 32.2), (0.8, 35.3)];
    let a = RdCurve::from_pairs("a", QualityField::Psnr, &anchor).unwrap();
    let t = RdCurve::from_pairs("t", QualityField::Psnr, &test).unwrap();
    let bd = bd_rate(&a, &t, QualityField::Psnr).unwrap();
    let oracle = trapezoid_bd(&anchor, &test);
    assert!(bd.is_finite() && bd < 0.0);
    assert!((bd - oracle).abs() < 0.5, "{bd} vs oracle {oracle}");

    let doubled: Vec<_> = anchor.iter().map(|&(r, q)| (2.0 * r, q)).collect();
    let d = RdCurve::from_pairs("d", QualityField::Psnr, &doubled).unwrap();
    let bd2 = bd_rate(&a, &d, QualityField::Psnr).unwrap();
    assert!((bd2 - 100.0).abs() < 1e-6);
    assert!((bd2 - trapezoid_bd(&anchor, &doubled)).abs() < 0.5);
}

#[test]
fn bd_rate_reciprocal_consistency() {
    let anchor = [(0.12, 0.52), (0.25, 0.41), (0.47, 0.30), (0.9, 0.22)];
    let test = [(0.10, 0.45), (0.21, 0.36), (0.43, 0.27), (0.8, 0.20)];
    let a = RdCurve::from_pairs("a", QualityField::Pdist, &anchor).unwrap();
    let t = RdCurve::from_pairs("t", QualityField::Pdist, &test).unwrap();
    let ab = bd_rate(&a, &t, QualityField::Pdist).unwrap();
    let ba = bd_rate(&t, &a, QualityField::Pdist).unwrap();
    assert!((ab - (-ba / (1.0 + ba / 100.0))).abs() < 0.1);
}
