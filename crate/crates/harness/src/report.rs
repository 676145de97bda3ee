//! SVG figures and the BD-rate table from sweep CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use alf_core::metrics::{bd_rate, QualityField, RdCurve, RdPoint};

use crate::error::{HarnessError, Result};
use crate::pipeline::write_atomic;
use crate::sweep::{read_rows, SweepRow};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 170.0, 40.0, 55.0); // left, right, top, bottom

/// A titled set of named polylines.
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round step of roughly a fifth of `span`: 1, 2 or 5 times a power of ten.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].into_iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1e-3) };
    (lo - pad, hi + pad)
}

impl Plot {
    pub fn to_svg(&self) -> String {
        let (ml, mr, mt, mb) = MARGIN;
        let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
        let pts = || self.series.iter().flat_map(|(_, p)| p.iter());
        let (x0, x1) = padded_range(pts().map(|p| p.0));
        let (y0, y1) = padded_range(pts().map(|p| p.1));
        let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            ml + pw / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{ml:.1}" y="{mt:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
        );
        for (lo, hi, horizontal) in [(x0, x1, true), (y0, y1, false)] {
            let step = tick_step(hi - lo);
            let mut v = (lo / step).ceil() * step;
            while v <= hi {
                let label = format!("{:.*}", (-step.log10().floor()).max(0.0) as usize, v);
                if horizontal {
                    let x = sx(v);
                    let _ = writeln!(
                        s,
                        r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"##,
                        mt,
                        mt + ph,
                        mt + ph + 16.0
                    );
                } else {
                    let y = sy(v);
                    let _ = writeln!(
                        s,
                        r##"<line x1="{ml:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"##,
                        ml + pw,
                        ml - 6.0,
                        y + 4.0
                    );
                }
                v += step;
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            ml + pw / 2.0,
            HEIGHT - 12.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            mt + ph / 2.0,
            mt + ph / 2.0,
            esc(&self.y_label)
        );
        for (i, (name, points)) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for &(x, y) in points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
            let ly = mt + 10.0 + 18.0 * i as f64;
            let lx = ml + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                esc(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Rows averaged over seeds, keyed by (label, τ, β) with float keys compared
/// by bit pattern.
type Averaged = BTreeMap<(String, u64, u64), RdPoint>;

fn average(rows: &[SweepRow]) -> Averaged {
    let mut sums: BTreeMap<(String, u64, u64), (RdPoint, usize)> = BTreeMap::new();
    for r in rows {
        let key = (r.label.clone(), r.tau.to_bits(), r.beta.to_bits());
        let e = sums.entry(key).or_insert((
            RdPoint {
                bpp: 0.0,
                psnr_db: 0.0,
                ssim: 0.0,
                pdist: 0.0,
                tau: r.tau,
                beta: r.beta,
            },
            0,
        ));
        e.0.bpp += r.bpp;
        e.0.psnr_db += r.psnr_db;
        e.0.ssim += r.ssim;
        e.0.pdist += r.pdist;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (mut p, n))| {
            let n = n as f64;
            p.bpp /= n;
            p.psnr_db /= n;
            p.ssim /= n;
            p.pdist /= n;
            (k, p)
        })
        .collect()
}

/// Points of each (label, τ) curve across β, sorted by bpp.
fn curves(avg: &Averaged) -> BTreeMap<(String, u64), Vec<RdPoint>> {
    let mut out: BTreeMap<(String, u64), Vec<RdPoint>> = BTreeMap::new();
    for ((label, tau, _), p) in avg {
        out.entry((label.clone(), *tau)).or_default().push(p.clone());
    }
    for pts in out.values_mut() {
        pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    }
    out
}

#[derive(Debug, Default)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub notices: Vec<String>,
}

pub fn bd_table(rows: &[SweepRow]) -> std::result::Result<String, String> {
    let taus: Vec<u64> = {
        let mut t: Vec<u64> = rows.iter().map(|r| r.tau.to_bits()).collect();
        t.sort_unstable();
        t.dedup();
        t
    };
    if taus.len() < 2 {
        return Err("BD table omitted: the CSV holds a single tau value".into());
    }
    let curves = curves(&average(rows));
    let (zero, one) = (0f64.to_bits(), 1f64.to_bits());
    let mut labels: Vec<&String> = curves.keys().map(|(l, _)| l).collect();
    labels.dedup();
    let mut table = String::from(
        "BD-rate of tau=0 against the tau=1 anchor (negative: fewer bits at equal quality)\n\n| label | psnr | pdist |\n|---|---|---|\n",
    );
    let mut any = false;
    for label in labels {
        let (Some(a), Some(t)) = (curves.get(&(label.clone(), one)), curves.get(&(label.clone(), zero))) else {
            continue;
        };
        let cell = |field| -> String {
            let anchor = RdCurve::new(format!("{label} tau=1"), a.clone());
            let test = RdCurve::new(format!("{label} tau=0"), t.clone());
            match anchor.and_then(|a| test.and_then(|t| bd_rate(&a, &t, field))) {
                Ok(v) => format!("{v:+.2}%"),
                Err(e) => format!("n/a ({e})"),
            }
        };
        let _ = writeln!(table, "| {label} | {} | {} |", cell(QualityField::Psnr), cell(QualityField::Pdist));
        any = true;
    }
    if !any {
        return Err("BD table omitted: no label has both tau=0 and tau=1 rows".into());
    }
    Ok(table)
}

/// Write the figures for `csv_paths` into `out_dir`.
pub fn report(csv_paths: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    let mut rows = Vec::new();
    for p in csv_paths {
        rows.extend(read_rows(p)?);
    }
    if rows.is_empty() {
        return Err(HarnessError::Csv {
            path: csv_paths.first().cloned().unwrap_or_default(),
            row: 0,
            message: "no data rows to report".into(),
        });
    }
    let avg = average(&rows);
    let curves = curves(&avg);
    let mut out = ReportOutput::default();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let path = out_dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        out.files.push(path);
        Ok(())
    };

    let metrics: [(&str, &str, fn(&RdPoint) -> f64); 3] = [
        ("psnr", "PSNR (dB)", |p| p.psnr_db),
        ("ssim", "SSIM", |p| p.ssim),
        ("pdist", "P-dist", |p| p.pdist),
    ];
    for (name, axis, get) in metrics {
        let plot = Plot {
            title: format!("Rate vs {axis}"),
            x_label: "bits per pixel".into(),
            y_label: axis.into(),
            series: curves
                .iter()
                .map(|((label, tau), pts)| {
                    (format!("{label} tau={}", f64::from_bits(*tau)), pts.iter().map(|p| (p.bpp, get(p))).collect())
                })
                .collect(),
        };
        emit(&format!("rd_{name}.svg"), plot.to_svg())?;
    }

    let tau_count = curves.keys().map(|(_, t)| *t).collect::<std::collections::BTreeSet<_>>().len();
    if tau_count > 1 {
        let mut by_beta: BTreeMap<(String, u64), Vec<&RdPoint>> = BTreeMap::new();
        for ((label, _, beta), p) in &avg {
            by_beta.entry((label.clone(), *beta)).or_default().push(p);
        }
        let plot = Plot {
            title: "Distortion-perception trade-off over tau".into(),
            x_label: "P-dist (lower is better)".into(),
            y_label: "PSNR (dB)".into(),
            series: by_beta
                .into_iter()
                .filter(|(_, pts)| pts.len() > 1)
                .map(|((label, beta), mut pts)| {
                    pts.sort_by(|a, b| a.tau.total_cmp(&b.tau));
                    (
                        format!("{label} beta={}", f64::from_bits(beta)),
                        pts.iter().map(|p| (p.pdist, p.psnr_db)).collect(),
                    )
                })
                .collect(),
        };
        emit("tradeoff.svg", plot.to_svg())?;
    } else {
        out.notices.push("trade-off scatter omitted: the CSV holds a single tau value".into());
    }

    match bd_table(&rows) {
        Ok(table) => emit("bd_table.md", table)?,
        Err(notice) => out.notices.push(notice),
    }
    Ok(out)
}
