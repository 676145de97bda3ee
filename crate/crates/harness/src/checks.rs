//! Self-contained verification suites shared by `alf selftest` and the
//! acceptance run. Each returns a [`CheckReport`] instead of panicking so a
//! caller can print every verdict.

use std::fmt;

use alf_core::codec::entropy::{SYMBOL_MAX, SYMBOL_MIN};
use alf_core::codec::range::{range_decode, range_encode};
use alf_core::codec::{rate_estimate, ChannelGaussians};
use alf_core::fusion::{ddim_step_tau, make_schedule, predict_noise, NoiseSchedule};
use alf_core::gradcheck;
use alf_core::metrics::{bd_rate, QualityField, RdCurve};
use alf_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckReport {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<String, String>) -> Self {
        match r {
            Ok(detail) => Self::new(name, true, detail),
            Err(detail) => Self::new(name, false, detail),
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    Tensor::randn(shape, rng).map(|v| v * scale)
}

/// Largest elementwise gap between `got` and an f64 reference.
fn worst(got: &Tensor, want: impl Iterator<Item = f64>) -> f64 {
    got.data().iter().zip(want).map(|(&g, w)| (g as f64 - w).abs()).fold(0.0, f64::max)
}

/// τ-step identities on `count` random latents: τ = 1 returns
/// `sqrt(a_prev) ŷ`, τ = 0 matches a plain DDIM step written out here, and
/// the noise estimate inverts the forward map.
pub fn algebra_suite(count: usize, seed: u64) -> CheckReport {
    let schedule: NoiseSchedule = make_schedule(1000, 1e-4, 0.02).expect("valid schedule");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |rng: &mut ChaCha8Rng| -> Result<(f64, f64, f64), String> {
        let (mut e1, mut e0, mut einv) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..count {
            let shape = [rng.random_range(1..=16), rng.random_range(1..=6), rng.random_range(1..=6)];
            let t = rng.random_range(1..=1000);
            let t_prev = rng.random_range(0..t);
            let y_t = randn(&shape, rng, 1.0);
            let y_hat = randn(&shape, rng, 3.0).map(f32::round);
            let d = randn(&shape, rng, 2.0);
            let a = schedule.alpha(t).map_err(|e| e.to_string())?;
            let ap = schedule.alpha(t_prev).map_err(|e| e.to_string())?;

            let one = ddim_step_tau(&y_t, &y_hat, &d, t, t_prev, 1.0, &schedule).map_err(|e| e.to_string())?;
            e1 = e1.max(worst(&one, y_hat.data().iter().map(|&v| ap.sqrt() * v as f64)));

            let zero = ddim_step_tau(&y_t, &y_hat, &d, t, t_prev, 0.0, &schedule).map_err(|e| e.to_string())?;
            let plain = y_t.data().iter().zip(d.data()).map(|(&y, &dv)| {
                let (y, dv) = (y as f64, dv as f64);
                let eps = (y - a.sqrt() * dv) / (1.0 - a).sqrt();
                ap.sqrt() * dv + (1.0 - ap).sqrt() * eps
            });
            e0 = e0.max(worst(&zero, plain));

            let eps = predict_noise(&y_t, &d, t, &schedule).map_err(|e| e.to_string())?;
            let back = Tensor::from_fn(shape, |i| {
                (a.sqrt() * d.data()[i] as f64 + (1.0 - a).sqrt() * eps.data()[i] as f64) as f32
            });
            einv = einv.max(back.max_abs_diff(&y_t));
        }
        Ok((e1, e0, einv))
    };
    let r = run(&mut rng).and_then(|(e1, e0, einv)| {
        let detail = format!(
            "{count} latents; max error tau=1 {e1:.1e}, tau=0 {e0:.1e}, noise inversion {einv:.1e} (limit 1e-6)"
        );
        if e1 <= 1e-6 && e0 <= 1e-6 && einv <= 1e-6 {
            Ok(detail)
        } else {
            Err(detail)
        }
    });
    CheckReport::from_result("algebra", r)
}

fn random_model(channels: usize, rng: &mut ChaCha8Rng) -> ChannelGaussians {
    ChannelGaussians {
        means: (0..channels).map(|_| rng.random_range(-4.0..4.0)).collect(),
        scales: (0..channels).map(|_| rng.random_range(-2.5f64..3.5).exp()).collect(),
    }
}

/// Range coder round trips on `count` random latents, a fifth of them
/// constant or alternating runs. For latents drawn from their model the coded
/// size must match the estimate within 2% + 32 bits; for the degenerate runs
/// it must not exceed the estimate by more than that, since a run of
/// improbable symbols can land on an unusually short code point.
pub fn coding_suite(count: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_ratio: f64 = 0.0;
    let mut below = 0usize;
    let mut degenerate = 0usize;
    let mut fail = None;
    for i in 0..count {
        let c = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let n = c * h * w;
        let model = random_model(c, &mut rng);
        let kind = i % 10;
        let symbols: Vec<i32> = match kind {
            0 => vec![rng.random_range(-5..5); n],
            1 => (0..n).map(|k| if k % 2 == 0 { -1 } else { 1 }).collect(),
            _ => (0..n)
                .map(|k| {
                    let ch = k / (h * w);
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    ((model.means[ch] + model.scales[ch] * z).round() as i32).clamp(SYMBOL_MIN, SYMBOL_MAX)
                })
                .collect(),
        };
        let tables = match model.tables() {
            Ok(t) => t,
            Err(e) => {
                fail = Some(format!("latent {i}: {e}"));
                break;
            }
        };
        let per = h * w;
        let idx: Vec<usize> = symbols.iter().map(|&s| (s - SYMBOL_MIN) as usize).collect();
        let coded = range_encode(&idx, &tables, |k| k / per).and_then(|b| {
            let back = range_decode(&b, &tables, idx.len(), |k| k / per)?;
            Ok((b, back))
        });
        let (bytes, back) = match coded {
            Ok(v) => v,
            Err(e) => {
                fail = Some(format!("latent {i}: {e}"));
                break;
            }
        };
        if back != idx {
            fail = Some(format!("latent {i} did not round-trip"));
            break;
        }
        let est = rate_estimate(&symbols, c, &model).unwrap_or(f64::NAN);
        let actual = 8.0 * bytes.len() as f64;
        let slack = 0.02 * est + 32.0;
        if kind < 2 {
            degenerate += 1;
            if actual >= est + slack {
                fail = Some(format!("degenerate latent {i}: coded {actual} bits, estimate {est:.1}"));
                break;
            }
            below += usize::from(est - actual >= slack);
        } else {
            let ratio = (est - actual).abs() / slack;
            worst_ratio = worst_ratio.max(ratio);
            if !(ratio < 1.0) {
                fail = Some(format!("latent {i}: coded {actual} bits, estimate {est:.1}"));
                break;
            }
        }
    }
    let r = match fail {
        Some(msg) => Err(msg),
        None => Ok(format!(
            "{count} latents round-trip; drawn latents worst |est-actual|/(2%+32) = {worst_ratio:.3}; \
             {degenerate} degenerate runs never above the bound, {below} of them coded below it"
        )),
    };
    CheckReport::from_result("coding", r)
}

/// Central finite differences against every autodiff primitive.
pub fn gradient_suite(seeds: u64) -> CheckReport {
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for seed in 0..seeds {
        match gradcheck::primitive_suite(seed) {
            Ok(list) => {
                checked = list.len();
                for (name, err) in list {
                    if !(err <= worst.0) {
                        worst = (err, name);
                    }
                }
            }
            Err(e) => return CheckReport::new("gradients", false, format!("seed {seed}: {e}")),
        }
    }
    let detail = format!(
        "{checked} primitives x {seeds} seeds; worst relative error {:.1e} ({}) (limit 1e-3)",
        worst.0, worst.1
    );
    CheckReport::new("gradients", worst.0 < 1e-3, detail)
}

/// Mean log-rate gap of `test` over `anchor` by trapezoidal integration of
/// piecewise-linear log-rate curves on a dense quality grid, in percent.
pub fn trapezoid_bd(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> Option<f64> {
    let prep = |c: &[(f64, f64)]| {
        let mut v: Vec<(f64, f64)> = c.iter().map(|&(r, q)| (q, r.ln())).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, t) = (prep(anchor), prep(test));
    let lo = a.first()?.0.max(t.first()?.0);
    let hi = a.last()?.0.min(t.last()?.0);
    if !(hi > lo) {
        return None;
    }
    let interp = |c: &[(f64, f64)], q: f64| {
        let k = c.partition_point(|p| p.0 <= q).clamp(1, c.len() - 1);
        let (p0, p1) = (c[k - 1], c[k]);
        p0.1 + (p1.1 - p0.1) * (q - p0.0) / (p1.0 - p0.0)
    };
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let gap = |q: f64| interp(&t, q) - interp(&a, q);
    let mut area = 0.5 * (gap(lo) + gap(hi));
    for i in 1..n {
        area += gap(lo + i as f64 * h);
    }
    Some(((area * h / (hi - lo)).exp() - 1.0) * 100.0)
}

/// BD-rate against closed-form and trapezoidal references: identical curves
/// give 0, doubled rates give +100%, a smooth quality-dependent rate change
/// agrees with the trapezoidal oracle within 0.5 points, and swapping the
/// curves inverts the rate ratio within 0.1 points.
pub fn bd_oracle_suite(seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |rng: &mut ChaCha8Rng| -> Result<String, String> {
        let bd = |a: &[(f64, f64)], t: &[(f64, f64)], field| -> Result<f64, String> {
            let ca = RdCurve::from_pairs("anchor", field, a).map_err(|e| e.to_string())?;
            let ct = RdCurve::from_pairs("test", field, t).map_err(|e| e.to_string())?;
            bd_rate(&ca, &ct, field).map_err(|e| e.to_string())
        };
        let base: Vec<(f64, f64)> = (0..6).map(|i| {
            let r = 0.1 * 1.6f64.powi(i);
            (r, 24.0 + 4.0 * r.ln() - 0.3 * r.ln().powi(2))
        }).collect();
        let same = bd(&base, &base, QualityField::Psnr)?;
        if format!("{same:.2}") != "0.00" && format!("{same:.2}") != "-0.00" {
            return Err(format!("identical curves gave {same}%"));
        }
        let doubled: Vec<_> = base.iter().map(|&(r, q)| (2.0 * r, q)).collect();
        let d = bd(&base, &doubled, QualityField::Psnr)?;
        let d_oracle = trapezoid_bd(&base, &doubled).ok_or("no overlap")?;
        if (d - d_oracle).abs() > 0.5 || (d - 100.0).abs() > 0.5 {
            return Err(format!("doubled rate gave {d:.3}%, oracle {d_oracle:.3}%"));
        }
        let mut worst_oracle: f64 = 0.0;
        let mut worst_recip: f64 = 0.0;
        for _ in 0..50 {
            let k = rng.random_range(-0.3..0.3);
            let shift = rng.random_range(-0.5..0.5);
            let test: Vec<_> = base
                .iter()
                .map(|&(r, q)| (r * (k * (q - 28.0) / 4.0).exp() * 1.2f64.powf(shift), q))
                .collect();
            let v = bd(&base, &test, QualityField::Psnr)?;
            let oracle = trapezoid_bd(&base, &test).ok_or("no overlap")?;
            worst_oracle = worst_oracle.max((v - oracle).abs());
            let back = bd(&test, &base, QualityField::Psnr)?;
            worst_recip = worst_recip.max((v + back / (1.0 + back / 100.0)).abs());
        }
        let detail = format!(
            "identical {same:.2}%, doubled {d:.3}% (oracle {d_oracle:.3}%), 50 smooth pairs: worst oracle gap {worst_oracle:.3} pts, worst reciprocal gap {worst_recip:.2e} pts"
        );
        if worst_oracle <= 0.5 && worst_recip <= 0.1 {
            Ok(detail)
        } else {
            Err(detail)
        }
    };
    CheckReport::from_result("bd-rate", run(&mut rng))
}
