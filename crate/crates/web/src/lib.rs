//! Browser demo over `alf-core`.
//!
//! Three operations, each a plain Rust function returning `Result<_, String>`
//! so it can be tested natively, wrapped by a `#[wasm_bindgen]` export that
//! hands JSON to the page:
//!
//! * [`trajectory`] walks the τ-weighted DDIM sampler on a one-number latent,
//! * [`code_symbols`] range-codes a list of integers under a Gaussian model,
//! * [`bd_rate_text`] computes BD-rate between two pasted curves.

use alf_core::codec::entropy::{SYMBOL_MAX, SYMBOL_MIN};
use alf_core::codec::range::{range_decode, range_encode};
use alf_core::codec::{rate_estimate, ChannelGaussians};
use alf_core::fusion::sampler::ddim_tau_scalar;
use alf_core::fusion::{make_schedule, timestep_grid};
use alf_core::metrics::{bd_rate, QualityField, RdCurve};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    /// Cumulative signal retention at `t`.
    pub alpha: f64,
    pub y: f64,
}

/// Run the sampler on a scalar latent whose denoiser always answers
/// `prediction`, starting from `start` at `t = T`. The last point is the
/// fused latent: `prediction` at `τ = 0`, `y_hat` at `τ = 1`.
pub fn trajectory(
    t_train: usize,
    steps: usize,
    tau: f64,
    y_hat: f64,
    prediction: f64,
    start: f64,
) -> Result<Vec<TrajectoryPoint>, String> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(format!("tau must lie in [0, 1], got {tau}"));
    }
    let schedule = make_schedule(t_train, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let grid = timestep_grid(t_train, steps).map_err(|e| e.to_string())?;
    let alpha = |t| schedule.alpha(t).map_err(|e| e.to_string());
    let mut y = start;
    let mut out = vec![TrajectoryPoint {
        t: grid[0],
        alpha: alpha(grid[0])?,
        y,
    }];
    for pair in grid.windows(2) {
        let (a_t, a_prev) = (alpha(pair[0])?, alpha(pair[1])?);
        y = ddim_tau_scalar(y, y_hat, prediction, a_t, a_prev, tau);
        out.push(TrajectoryPoint {
            t: pair[1],
            alpha: a_prev,
            y,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodingReport {
    pub symbols: usize,
    pub hex: String,
    pub actual_bits: usize,
    pub estimated_bits: f64,
    pub round_trip: bool,
}

fn numbers<T: std::str::FromStr>(text: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c.is_whitespace() || c == ',' || c == ';')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("not a number: {s:?}")))
        .collect()
}

/// Range-code integers in `[-64, 63]` under one Gaussian with `mean` and
/// `scale`, decode them back and compare the size with the estimate.
pub fn code_symbols(text: &str, mean: f64, scale: f64) -> Result<CodingReport, String> {
    let symbols: Vec<i32> = numbers(text)?;
    if let Some(s) = symbols.iter().find(|s| !(SYMBOL_MIN..=SYMBOL_MAX).contains(*s)) {
        return Err(format!("symbol {s} is outside [{SYMBOL_MIN}, {SYMBOL_MAX}]"));
    }
    let model = ChannelGaussians {
        means: vec![mean],
        scales: vec![scale],
    };
    let tables = model.tables().map_err(|e| e.to_string())?;
    let idx: Vec<usize> = symbols.iter().map(|&s| (s - SYMBOL_MIN) as usize).collect();
    let bytes = range_encode(&idx, &tables, |_| 0).map_err(|e| e.to_string())?;
    let back = range_decode(&bytes, &tables, idx.len(), |_| 0).map_err(|e| e.to_string())?;
    Ok(CodingReport {
        symbols: symbols.len(),
        hex: bytes.iter().map(|b| format!("{b:02x}")).collect(),
        actual_bits: 8 * bytes.len(),
        estimated_bits: rate_estimate(&symbols, 1, &model).map_err(|e| e.to_string())?,
        round_trip: back == idx,
    })
}

fn curve(label: &str, text: &str, field: QualityField) -> Result<RdCurve, String> {
    let values: Vec<f64> = numbers(text)?;
    if !values.len().is_multiple_of(2) {
        return Err(format!("{label}: expected (bpp, quality) pairs, got {} numbers", values.len()));
    }
    let pairs: Vec<(f64, f64)> = values.chunks(2).map(|p| (p[0], p[1])).collect();
    RdCurve::from_pairs(label, field, &pairs).map_err(|e| format!("{label}: {e}"))
}

/// BD-rate in percent of `test` against `anchor`, each given as
/// whitespace- or comma-separated `bpp quality` pairs.
pub fn bd_rate_text(anchor: &str, test: &str, field: &str) -> Result<f64, String> {
    let field: QualityField = field.parse().map_err(|e: alf_core::Error| e.to_string())?;
    let a = curve("anchor", anchor, field)?;
    let t = curve("test", test, field)?;
    bd_rate(&a, &t, field).map_err(|e| e.to_string())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = trajectory)]
pub fn trajectory_js(
    t_train: usize,
    steps: usize,
    tau: f64,
    y_hat: f64,
    prediction: f64,
    start: f64,
) -> Result<String, JsValue> {
    to_js(trajectory(t_train, steps, tau, y_hat, prediction, start))
}

#[wasm_bindgen(js_name = codeSymbols)]
pub fn code_symbols_js(text: &str, mean: f64, scale: f64) -> Result<String, JsValue> {
    to_js(code_symbols(text, mean, scale))
}

#[wasm_bindgen(js_name = bdRate)]
pub fn bd_rate_js(anchor: &str, test: &str, field: &str) -> Result<f64, JsValue> {
    bd_rate_text(anchor, test, field).map_err(|e| JsValue::from_str(&e))
}
