//! Held-out evaluation over τ, sampler step counts and seeds.

use std::path::Path;
use std::time::{Duration, Instant};

use alf_core::codec::Bitstream;
use alf_core::fusion::{linear_fusion, sample, translate_variant1, SamplerConfig};
use alf_core::metrics::{pdist, psnr, ssim, RdPoint};
use alf_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{hex_digest, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::pipeline::{load_models, Data, Layout, Models, RunManifest};

/// Label of sampler rows run with `steps` denoiser calls.
pub fn fusion_label(steps: usize) -> String {
    format!("fusion@{steps}")
}

pub const VARIANT1_LABEL: &str = "variant1";

/// One CSV row: held-out means for a (label, β, τ, seed) setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub beta: f64,
    pub tau: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub pdist: f64,
    pub seed: u64,
}

impl SweepRow {
    pub fn point(&self) -> RdPoint {
        RdPoint {
            bpp: self.bpp,
            psnr_db: self.psnr_db,
            ssim: self.ssim,
            pdist: self.pdist,
            tau: self.tau,
            beta: self.beta,
        }
    }
}

/// Sampler wall time over the held-out set at `τ = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub beta: f64,
    pub steps: usize,
    pub seed: u64,
    pub images: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub timings: Vec<Timing>,
    /// Per β, SHA-256 over the held-out bitstreams every row of that β
    /// decodes.
    pub bitstream_digests: Vec<(f64, String)>,
}

/// Which points to evaluate.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub betas: Vec<f64>,
    pub taus: Vec<f64>,
    /// Extra step counts, run at `τ = 0` only.
    pub steps: Vec<usize>,
    /// Step count of the τ sweep.
    pub default_steps: usize,
    pub seeds: Vec<u64>,
    pub variant1: bool,
}

impl SweepPlan {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        SweepPlan {
            betas: config.codec.betas.clone(),
            taus: config.sweep.taus.clone(),
            steps: config.sweep.steps.clone(),
            default_steps: config.sweep.default_steps,
            seeds: config.sweep.seeds.clone(),
            variant1: true,
        }
    }

    /// `(steps, taus)` pairs: the full τ grid at the default step count,
    /// then `τ = 0` at every other count, in grid order.
    fn settings(&self) -> Vec<(usize, Vec<f64>)> {
        let mut out = vec![(self.default_steps, self.taus.clone())];
        for &s in &self.steps {
            if s != self.default_steps && !out.iter().any(|(k, _)| *k == s) {
                out.push((s, vec![0.0]));
            }
        }
        out
    }
}

struct ImageMetrics {
    psnr: f64,
    ssim: f64,
    pdist: f64,
}

struct Prepared<'a> {
    images: &'a [Tensor],
    y_hat: Vec<Tensor>,
    bpp: f64,
    digest: String,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn measure(originals: &[Tensor], decoded: &Tensor) -> alf_core::Result<Vec<ImageMetrics>> {
    originals
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let xh = decoded.index0(i).map(|v| v.clamp(0.0, 1.0));
            Ok(ImageMetrics {
                psnr: psnr(x, &xh, 1.0)?,
                ssim: ssim(x, &xh)?,
                pdist: pdist(x, &xh)?,
            })
        })
        .collect()
}

struct Evaluator<'a> {
    models: &'a Models,
    pool: &'a rayon::ThreadPool,
    batch: usize,
}

impl Evaluator<'_> {
    fn prepare<'i>(&self, images: &'i [Tensor]) -> Result<Prepared<'i>> {
        let base = &self.models.base;
        let streams: Vec<Bitstream> = self
            .pool
            .install(|| images.par_iter().map(|x| base.compress(x)).collect::<alf_core::Result<_>>())?;
        let y_hat = streams
            .iter()
            .map(|b| base.decompress_latent(b))
            .collect::<alf_core::Result<Vec<_>>>()?;
        let bpp = mean(
            streams
                .iter()
                .zip(images)
                .map(|(b, x)| b.payload_bits() as f64 / (x.shape()[1] * x.shape()[2]) as f64),
        );
        let all: Vec<u8> = streams.iter().flat_map(|b| b.to_bytes()).collect();
        Ok(Prepared {
            images,
            y_hat,
            bpp,
            digest: hex_digest(&all),
        })
    }

    /// Decode every held-out image through `decode` in fixed-size batches;
    /// returns per-image metrics in order plus the summed time spent inside
    /// `decode`.
    fn run<F>(&self, prep: &Prepared, decode: F) -> Result<(Vec<ImageMetrics>, Duration)>
    where
        F: Fn(&Tensor, u64) -> alf_core::Result<Tensor> + Sync,
    {
        let starts: Vec<usize> = (0..prep.images.len()).step_by(self.batch).collect();
        let chunks: Vec<(Vec<ImageMetrics>, Duration)> = self.pool.install(|| {
            starts
                .par_iter()
                .map(|&start| {
                    let end = (start + self.batch).min(prep.images.len());
                    let y_hat = Tensor::stack(&prep.y_hat[start..end])?;
                    let t0 = Instant::now();
                    let y = decode(&y_hat, start as u64)?;
                    let spent = t0.elapsed();
                    let x_hat = self.models.base.synthesis_batch(&y)?;
                    Ok((measure(&prep.images[start..end], &x_hat)?, spent))
                })
                .collect::<alf_core::Result<_>>()
        })?;
        let mut metrics = Vec::with_capacity(prep.images.len());
        let mut total = Duration::ZERO;
        for (m, d) in chunks {
            metrics.extend(m);
            total += d;
        }
        Ok((metrics, total))
    }
}

fn row(label: String, beta: f64, tau: f64, seed: u64, bpp: f64, m: &[ImageMetrics]) -> SweepRow {
    SweepRow {
        label,
        beta,
        tau,
        bpp,
        psnr_db: mean(m.iter().map(|v| v.psnr)),
        ssim: mean(m.iter().map(|v| v.ssim)),
        pdist: mean(m.iter().map(|v| v.pdist)),
        seed,
    }
}

/// Evaluate `plan` on the held-out split with the checkpoints under
/// `config.run.out_dir`.
pub fn sweep(config: &ExperimentConfig, plan: &SweepPlan) -> Result<SweepOutput> {
    let data = Data::load(config)?;
    let layout = Layout::new(&config.run.out_dir);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count())
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut out = SweepOutput::default();
    for &beta in &plan.betas {
        let models = load_models(&layout, beta)?;
        let eval = Evaluator {
            models: &models,
            pool: &pool,
            batch: config.sweep.batch,
        };
        let prep = eval.prepare(data.held_out())?;
        out.bitstream_digests.push((beta, prep.digest.clone()));
        for &seed in &plan.seeds {
            for (steps, taus) in plan.settings() {
                for &tau in &taus {
                    log::info!("sweep beta {beta} seed {seed} steps {steps} tau {tau}");
                    let cfg = SamplerConfig { steps, tau, seed };
                    let fusion = &models.fusion;
                    let (m, spent) = eval.run(&prep, |y_hat, first| {
                        sample(y_hat, &cfg, &fusion.denoiser, &fusion.schedule, first)
                    })?;
                    if tau == 0.0 {
                        out.timings.push(Timing {
                            beta,
                            steps,
                            seed,
                            images: prep.images.len(),
                            seconds: spent.as_secs_f64(),
                        });
                    }
                    out.rows.push(row(fusion_label(steps), beta, tau, seed, prep.bpp, &m));
                }
            }
        }
        if plan.variant1 {
            let translator = &models.variant1.translator;
            let seed = plan.seeds[0];
            for &tau in &plan.taus {
                let (m, _) = eval.run(&prep, |y_hat, _| {
                    linear_fusion(&translate_variant1(y_hat, translator)?, y_hat, tau)
                })?;
                out.rows.push(row(VARIANT1_LABEL.into(), beta, tau, seed, prep.bpp, &m));
            }
        }
    }
    Ok(out)
}

/// Run the configured sweep and write `sweep.csv` and `timing.csv` into the
/// run directory, listing both in the manifest when one exists.
pub fn sweep_to_files(config: &ExperimentConfig) -> Result<SweepOutput> {
    let out = sweep(config, &SweepPlan::from_config(config))?;
    let layout = Layout::new(&config.run.out_dir);
    write_rows(&layout.sweep_csv(), &out.rows)?;
    write_timings(&layout.timing_csv(), &out.timings)?;
    let manifest_path = layout.manifest();
    if manifest_path.is_file() {
        let mut manifest = RunManifest::load(&manifest_path)?;
        manifest.record_output(&layout.sweep_csv())?;
        manifest.record_output(&layout.timing_csv())?;
        manifest.save(&manifest_path)?;
    }
    Ok(out)
}

fn csv_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for item in items {
        w.serialize(item).map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))
}

pub fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    crate::pipeline::write_atomic(path, &csv_bytes(rows)?)
}

pub fn write_timings(path: &Path, timings: &[Timing]) -> Result<()> {
    crate::pipeline::write_atomic(path, &csv_bytes(timings)?)
}

/// Parse a sweep CSV; errors carry the 1-based data row number.
pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let file = std::fs::File::open(path).map_err(HarnessError::io(path))?;
    let mut reader = csv::Reader::from_reader(file);
    let bad = |row: usize, message: String| HarnessError::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let headers = reader.headers().map_err(|e| bad(0, e.to_string()))?.clone();
    let expected = ["label", "beta", "tau", "bpp", "psnr_db", "ssim", "pdist", "seed"];
    if headers.iter().ne(expected) {
        return Err(bad(0, format!("header must be {}", expected.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<SweepRow>().enumerate() {
        let r = rec.map_err(|e| bad(i + 1, e.to_string()))?;
        let finite = [r.beta, r.tau, r.bpp, r.psnr_db, r.ssim, r.pdist].iter().all(|v| v.is_finite());
        if !finite {
            return Err(bad(i + 1, "non-finite value".into()));
        }
        rows.push(r);
    }
    Ok(rows)
}
