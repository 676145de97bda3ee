//! Seeded synthetic images for training and evaluation.
//!
//! Each image is one of: a Gaussian random field at one of three correlation
//! lengths, a two-colour checkerboard, a linear gradient, or a sum of
//! sinusoids. Values sit on the 8-bit grid so that writing to PNG and reading
//! back is lossless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Field { correlation: usize },
    Checkerboard,
    Gradient,
    Sinusoids,
}

/// Random field correlation lengths in pixels.
pub const CORRELATION_LENGTHS: [usize; 3] = [1, 3, 6];

impl Pattern {
    fn pick(rng: &mut ChaCha8Rng) -> Pattern {
        match rng.random_range(0..6) {
            0..=2 => Pattern::Field {
                correlation: CORRELATION_LENGTHS[rng.random_range(0..3)],
            },
            3 => Pattern::Checkerboard,
            4 => Pattern::Gradient,
            _ => Pattern::Sinusoids,
        }
    }
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Separable blur with wrap-around so fields tile without edge artefacts.
fn blur_plane(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s = size as isize;
    let pass = |input: &[f64], horizontal: bool| {
        let mut out = vec![0.0; size * size];
        for y in 0..s {
            for x in 0..s {
                out[(y * s + x) as usize] = (-r..=r)
                    .map(|i| {
                        let (yy, xx) = if horizontal { (y, (x + i).rem_euclid(s)) } else { ((y + i).rem_euclid(s), x) };
                        k[(i + r) as usize] * input[(yy * s + xx) as usize]
                    })
                    .sum();
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Rescale to `[0, 1]` by min/max.
fn stretch(plane: &mut [f64]) {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    plane.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

fn render(pattern: Pattern, size: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = size * size;
    let (a, b) = (colour(rng), colour(rng));
    let mix = |t: f64| [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t);
    match pattern {
        Pattern::Field { correlation } => {
            // Independent fields per channel, mixed towards a shared luminance
            // field so colours stay correlated like natural images.
            let mut planes: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                    let mut p = blur_plane(&white, size, correlation as f64);
                    stretch(&mut p);
                    p
                })
                .collect();
            let shared = planes.pop().expect("four planes");
            let contrast = 0.5 + 0.5 * a[0];
            let offset = (1.0 - contrast) * b[0];
            (0..n)
                .map(|i| [0, 1, 2].map(|c| offset + contrast * (0.7 * shared[i] + 0.3 * planes[c][i])))
                .collect()
        }
        Pattern::Checkerboard => {
            let period = [2, 4, 8][rng.random_range(0..3)];
            let (ox, oy) = (rng.random_range(0..period), rng.random_range(0..period));
            (0..n)
                .map(|i| {
                    let (y, x) = (i / size + oy, i % size + ox);
                    if (x / period + y / period) % 2 == 0 { a } else { b }
                })
                .collect()
        }
        Pattern::Gradient => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let proj: Vec<f64> = (0..n)
                .map(|i| (i % size) as f64 * dx + (i / size) as f64 * dy)
                .collect();
            let mut t = proj;
            stretch(&mut t);
            t.into_iter().map(mix).collect()
        }
        Pattern::Sinusoids => {
            let waves: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=3))
                .map(|_| {
                    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let freq = rng.random_range(0.15..1.2);
                    (angle.cos() * freq, angle.sin() * freq, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0))
                })
                .collect();
            let mut t: Vec<f64> = (0..n)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).sin()).sum()
                })
                .collect();
            stretch(&mut t);
            t.into_iter().map(mix).collect()
        }
    }
}

fn to_8bit(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Image `index` of the synthetic set drawn from `seed`, as `[3, size, size]`.
pub fn synthetic_image(seed: u64, index: usize, size: usize) -> Result<(Pattern, Tensor)> {
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let pattern = Pattern::pick(&mut rng);
    let pixels = render(pattern, size, &mut rng);
    let plane = size * size;
    let t = Tensor::from_fn([3, size, size], |i| to_8bit(pixels[i % plane][i / plane]));
    Ok((pattern, t))
}

/// `count` synthetic images; image `i` depends only on `(seed, i, size)`.
pub fn synthetic_set(seed: u64, count: usize, size: usize) -> Result<Vec<Tensor>> {
    (0..count).map(|i| synthetic_image(seed, i, size).map(|(_, t)| t)).collect()
}

/// Split off the last tenth (at least one image when there are two or more)
/// as the held-out set.
pub fn split_held_out(images: &[Tensor]) -> (&[Tensor], &[Tensor]) {
    let held = if images.len() >= 2 { (images.len() / 10).max(1) } else { 0 };
    images.split_at(images.len() - held)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_deterministic_and_on_the_8bit_grid() {
        let a = synthetic_set(4, 12, 16).unwrap();
        let b = synthetic_set(4, 12, 16).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert_eq!(t.shape(), &[3, 16, 16]);
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v) && ((v * 255.0).round() - v * 255.0).abs() < 1e-4));
        }
        assert_ne!(a[0], synthetic_set(5, 1, 16).unwrap()[0]);
    }

    #[test]
    fn index_does_not_depend_on_count() {
        assert_eq!(synthetic_set(1, 3, 8).unwrap()[2], synthetic_set(1, 7, 8).unwrap()[2]);
    }

    #[test]
    fn every_pattern_appears() {
        let kinds: Vec<Pattern> = (0..200).map(|i| synthetic_image(0, i, 8).unwrap().0).collect();
        assert!(kinds.contains(&Pattern::Checkerboard));
        assert!(kinds.contains(&Pattern::Gradient));
        assert!(kinds.contains(&Pattern::Sinusoids));
        for c in CORRELATION_LENGTHS {
            assert!(kinds.contains(&Pattern::Field { correlation: c }));
        }
    }

    #[test]
    fn held_out_is_the_last_tenth() {
        let imgs = synthetic_set(0, 25, 8).unwrap();
        let (train, held) = split_held_out(&imgs);
        assert_eq!((train.len(), held.len()), (23, 2));
        assert_eq!(held[0], imgs[23]);
        assert_eq!(split_held_out(&imgs[..1]).1.len(), 0);
    }
}
