//! Bjøntegaard-delta rate between two rate-quality curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One measured operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub pdist: f64,
    pub tau: f64,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityField {
    Psnr,
    Ssim,
    Pdist,
}

impl QualityField {
    pub fn of(self, p: &RdPoint) -> f64 {
        match self {
            QualityField::Psnr => p.psnr_db,
            QualityField::Ssim => p.ssim,
            QualityField::Pdist => p.pdist,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QualityField::Psnr => "psnr",
            QualityField::Ssim => "ssim",
            QualityField::Pdist => "pdist",
        }
    }
}

impl std::str::FromStr for QualityField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" | "psnr_db" => Ok(QualityField::Psnr),
            "ssim" => Ok(QualityField::Ssim),
            "pdist" => Ok(QualityField::Pdist),
            other => Err(Error::Config(format!("unknown quality field {other:?}"))),
        }
    }
}

/// A labelled curve with strictly increasing bpp.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by bpp; rejects non-positive or repeated rates.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for p in &points {
            if !(p.bpp > 0.0) || !p.bpp.is_finite() {
                return Err(Error::Domain(format!("bpp must be positive, got {}", p.bpp)));
            }
        }
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::Domain("bpp values must be distinct".into()));
        }
        Ok(RdCurve {
            label: label.into(),
            points,
        })
    }

    /// Curve from `(bpp, quality)` pairs with the quality stored in `field`.
    pub fn from_pairs(label: impl Into<String>, field: QualityField, pairs: &[(f64, f64)]) -> Result<Self> {
        let points = pairs
            .iter()
            .map(|&(bpp, q)| {
                let mut p = RdPoint {
                    bpp,
                    psnr_db: 0.0,
                    ssim: 0.0,
                    pdist: 0.0,
                    tau: 0.0,
                    beta: 0.0,
                };
                match field {
                    QualityField::Psnr => p.psnr_db = q,
                    QualityField::Ssim => p.ssim = q,
                    QualityField::Pdist => p.pdist = q,
                }
                p
            })
            .collect();
        Self::new(label, points)
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }
}

pub const BD_MIN_POINTS: usize = 4;

/// Cubic least-squares fit of `log(rate)` against normalised quality.
struct LogRateFit {
    coeffs: [f64; 4],
    center: f64,
    half_width: f64,
    lo: f64,
    hi: f64,
}

impl LogRateFit {
    fn new(curve: &RdCurve, field: QualityField) -> Result<Self> {
        let pts = curve.points();
        if pts.len() < BD_MIN_POINTS {
            return Err(Error::Domain(format!(
                "curve {:?} has {} points; BD-rate needs at least {BD_MIN_POINTS}",
                curve.label,
                pts.len()
            )));
        }
        let q: Vec<f64> = pts.iter().map(|p| field.of(p)).collect();
        let increasing = q.windows(2).all(|w| w[1] > w[0]);
        let decreasing = q.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) {
            return Err(Error::Domain(format!(
                "{} on curve {:?} is not strictly monotone in rate",
                field.name(),
                curve.label
            )));
        }
        let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let center = 0.5 * (lo + hi);
        let half_width = 0.5 * (hi - lo);
        // Normal equations on [-1, 1]-scaled abscissae are well conditioned
        // for a cubic.
        let mut ata = [[0.0f64; 4]; 4];
        let mut atb = [0.0f64; 4];
        for (p, &qi) in pts.iter().zip(&q) {
            let s = (qi - center) / half_width;
            let basis = [1.0, s, s * s, s * s * s];
            let target = p.bpp.ln();
            for r in 0..4 {
                atb[r] += basis[r] * target;
                for c in 0..4 {
                    ata[r][c] += basis[r] * basis[c];
                }
            }
        }
        let coeffs = solve4(ata, atb)
            .ok_or_else(|| Error::Domain(format!("singular cubic fit for curve {:?}", curve.label)))?;
        Ok(LogRateFit {
            coeffs,
            center,
            half_width,
            lo,
            hi,
        })
    }

    /// Exact integral of the fitted polynomial over `[a, b]` in quality units.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let anti = |q: f64| {
            let s = (q - self.center) / self.half_width;
            let c = &self.coeffs;
            self.half_width * (c[0] * s + c[1] * s * s / 2.0 + c[2] * s.powi(3) / 3.0 + c[3] * s.powi(4) / 4.0)
        };
        anti(b) - anti(a)
    }
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Average rate difference of `test` relative to `anchor` in percent over the
/// overlapping quality range. Negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve, field: QualityField) -> Result<f64> {
    let fa = LogRateFit::new(anchor, field)?;
    let ft = LogRateFit::new(test, field)?;
    let lo = fa.lo.max(ft.lo);
    let hi = fa.hi.min(ft.hi);
    if !(hi > lo) {
        return Err(Error::Domain(format!(
            "{} ranges of {:?} and {:?} do not overlap",
            field.name(),
            anchor.label,
            test.label
        )));
    }
    let mean_diff = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((mean_diff.exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn psnr_curve(label: &str, pairs: &[(f64, f64)]) -> RdCurve {
        RdCurve::from_pairs(label, QualityField::Psnr, pairs).unwrap()
    }

    #[test]
    fn identical_curves_give_zero() {
        let c = psnr_curve("a", &[(0.1, 28.0), (0.2, 30.5), (0.4, 33.0), (0.8, 35.2)]);
        assert!(bd_rate(&c, &c, QualityField::Psnr).unwrap().abs() < 1e-9);
    }

    #[test]
    fn doubled_rate_is_plus_hundred() {
        let pairs = [(0.1, 28.0), (0.2, 30.5), (0.4, 33.0), (0.8, 35.2), (1.3, 37.0)];
        let a = psnr_curve("a", &pairs);
        let doubled: Vec<_> = pairs.iter().map(|&(r, q)| (2.0 * r, q)).collect();
        let b = psnr_curve("b", &doubled);
        assert!((bd_rate(&a, &b, QualityField::Psnr).unwrap() - 100.0).abs() < 1e-6);
        assert!((bd_rate(&b, &a, QualityField::Psnr).unwrap() + 50.0).abs() < 1e-6);
    }

    #[test]
    fn decreasing_quality_fields_are_accepted() {
        let a = RdCurve::from_pairs("a", QualityField::Pdist, &[(0.1, 0.9), (0.2, 0.6), (0.4, 0.4), (0.8, 0.3)]).unwrap();
        let b = RdCurve::from_pairs("b", QualityField::Pdist, &[(0.12, 0.9), (0.25, 0.6), (0.5, 0.4), (0.9, 0.3)]).unwrap();
        assert!(bd_rate(&a, &b, QualityField::Pdist).unwrap() > 0.0);
    }

    #[test]
    fn errors() {
        let a = psnr_curve("a", &[(0.1, 28.0), (0.2, 30.5), (0.4, 33.0), (0.8, 35.2)]);
        let far = psnr_curve("far", &[(0.1, 40.0), (0.2, 41.0), (0.4, 42.0), (0.8, 43.0)]);
        assert!(matches!(bd_rate(&a, &far, QualityField::Psnr), Err(Error::Domain(_))));
        let short = psnr_curve("short", &[(0.1, 28.0), (0.2, 30.0), (0.4, 33.0)]);
        assert!(bd_rate(&a, &short, QualityField::Psnr).is_err());
        let wiggly = psnr_curve("w", &[(0.1, 28.0), (0.2, 31.0), (0.4, 30.0), (0.8, 35.0)]);
        assert!(bd_rate(&a, &wiggly, QualityField::Psnr).is_err());
        assert!(RdCurve::from_pairs("dup", QualityField::Psnr, &[(0.1, 1.0), (0.1, 2.0)]).is_err());
    }
}
