//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.
//!
//! The toy pipeline trains into a fresh temporary directory. Setting
//! `ALF_ACCEPTANCE_DIR` reuses a run directory instead; stages whose inputs
//! are unchanged then load from their checkpoints and the training budget is
//! reported as not measured.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use alf_core::codec::{Checkpoint, BASE_PREFIXES};
use alf_core::fusion::{decode_controlled, train_aux_encoder, train_fusion, SamplerConfig};
use alf_core::Tensor;
use alf_harness::checks::{self, CheckReport};
use alf_harness::config::ExperimentConfig;
use alf_harness::pipeline::{load_models, run_pipeline, Data, Layout, RunManifest, Stage};
use alf_harness::sweep::{fusion_label, sweep_to_files, SweepOutput, SweepRow};
use sha2::{Digest, Sha256};

const TAU_GRID: [f64; 5] = [0.0, 0.3, 0.5, 0.8, 1.0];
const STEP_GRID: [usize; 5] = [1, 5, 10, 20, 40];

fn timed(name: &str, limit: Duration, f: impl FnOnce() -> CheckReport) -> CheckReport {
    let started = Instant::now();
    let mut r = f();
    let spent = started.elapsed();
    r.name = name.into();
    r.detail = format!("{} [{:.1}s, limit {}s]", r.detail, spent.as_secs_f64(), limit.as_secs());
    r.passed &= spent < limit;
    r
}

fn failed(name: &str, e: impl std::fmt::Display) -> CheckReport {
    CheckReport::new(name, false, format!("error: {e}"))
}

/// Ranks with ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = mean;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Rows of one label at the first β and seed, in the order of `taus`.
fn tau_rows<'a>(rows: &'a [SweepRow], label: &str, taus: &[f64]) -> Option<Vec<&'a SweepRow>> {
    let beta = rows.first()?.beta;
    taus.iter()
        .map(|&t| rows.iter().find(|r| r.label == label && r.beta == beta && r.tau == t))
        .collect()
}

struct Run {
    config: ExperimentConfig,
    manifest: RunManifest,
    training: Option<Duration>,
    _tmp: Option<tempfile::TempDir>,
}

fn toy_config(out_dir: &Path) -> alf_harness::Result<ExperimentConfig> {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let out = out_dir.to_string_lossy().into_owned();
    ExperimentConfig::load(Some(&file), &[("run.out_dir".into(), out)])
}

fn train_toy() -> alf_harness::Result<Run> {
    let (dir, tmp) = match std::env::var_os("ALF_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR"))
                .map_err(|e| alf_harness::HarnessError::Config(e.to_string()))?;
            (t.path().to_path_buf(), Some(t))
        }
    };
    let config = toy_config(&dir)?;
    let started = Instant::now();
    let manifest = run_pipeline(&config)?;
    let training = manifest.stages.iter().all(|s| !s.cached).then(|| started.elapsed());
    Ok(Run {
        config,
        manifest,
        training,
        _tmp: tmp,
    })
}

fn pass_through(run: &Run) -> alf_harness::Result<CheckReport> {
    let config = &run.config;
    let beta = config.codec.betas[0];
    let models = load_models(&Layout::new(&config.run.out_dir), beta)?;
    let data = Data::load(config)?;
    let images: &[Tensor] = &data.held_out()[..20];
    let mut worst = 0.0f64;
    let mut differing = 0;
    for (i, x) in images.iter().enumerate() {
        let reference = models.base.compress(x)?;
        let base_img = models.base.decompress(&reference)?;
        for &tau in &TAU_GRID {
            if models.base.compress(x)?.to_bytes() != reference.to_bytes() {
                differing += 1;
            }
            if tau == 1.0 {
                for (steps, seed) in [(1, 0), (10, 0), (40, 7)] {
                    let cfg = SamplerConfig { steps, tau, seed };
                    let img = decode_controlled(&reference, &cfg, i as u64, &models.base, &models.fusion)?;
                    let gap = img
                        .data()
                        .iter()
                        .zip(base_img.data())
                        .map(|(a, b)| (a - b).abs() as f64)
                        .fold(0.0, f64::max);
                    worst = worst.max(gap);
                }
            }
        }
    }
    Ok(CheckReport::new(
        "",
        worst <= 1e-6 && differing == 0,
        format!("20 images, max pixel gap at tau=1 {worst:.2e}, bitstreams differing across tau {differing}"),
    ))
}

fn trend(run: &Run, out: &SweepOutput) -> CheckReport {
    let label = fusion_label(run.config.sweep.default_steps);
    let Some(rows) = tau_rows(&out.rows, &label, &TAU_GRID) else {
        return CheckReport::new("", false, format!("sweep is missing {label} rows on the tau grid"));
    };
    let pd: Vec<f64> = rows.iter().map(|r| r.pdist).collect();
    let ps: Vec<f64> = rows.iter().map(|r| r.psnr_db).collect();
    let (rho_pd, rho_ps) = (spearman(&TAU_GRID, &pd), spearman(&TAU_GRID, &ps));
    let rel_gain = 1.0 - pd[0] / pd[4];
    let psnr_gap = ps[4] - ps[0];
    let budget = match run.training {
        Some(d) => format!("training {:.1} min", d.as_secs_f64() / 60.0),
        None => "training budget not measured (cached stages)".into(),
    };
    let budget_ok = run.training.is_none_or(|d| d < Duration::from_secs(45 * 60));
    let margins_ok = rho_pd == 1.0 && rho_ps == 1.0 && rel_gain >= 0.10 && psnr_gap >= 0.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let mut detail = format!(
        "pdist [{}] rho {rho_pd:+.2}; psnr [{}] rho {rho_ps:+.2}; pdist(0) {:.1}% below pdist(1); psnr(1)-psnr(0) {psnr_gap:+.3} dB; {budget}",
        fmt(&pd),
        fmt(&ps),
        100.0 * rel_gain
    );
    if !margins_ok {
        detail.push_str("; tuning failure: the trained toy models miss the trend margins");
    }
    CheckReport::new("", margins_ok && budget_ok, detail)
}

fn step_ablation(run: &Run, out: &SweepOutput) -> CheckReport {
    let beta = run.config.codec.betas[0];
    let timing: Option<Vec<f64>> = STEP_GRID
        .iter()
        .map(|&s| out.timings.iter().find(|t| t.steps == s && t.beta == beta).map(|t| t.seconds))
        .collect();
    let quality: Option<Vec<f64>> = STEP_GRID
        .iter()
        .map(|&s| {
            out.rows
                .iter()
                .find(|r| r.label == fusion_label(s) && r.tau == 0.0 && r.beta == beta)
                .map(|r| r.pdist)
        })
        .collect();
    let (Some(secs), Some(pd)) = (timing, quality) else {
        return CheckReport::new("", false, "sweep did not cover every step count at tau=0");
    };
    let steps: Vec<f64> = STEP_GRID.iter().map(|&s| s as f64).collect();
    let r2 = pearson(&steps, &secs).powi(2);
    let best = pd.iter().copied().fold(f64::INFINITY, f64::min);
    let at10 = pd[STEP_GRID.iter().position(|&s| s == 10).unwrap()];
    let within = at10 <= 1.05 * best;
    let fmt = |v: &[f64], p: usize| v.iter().map(|x| format!("{x:.p$}")).collect::<Vec<_>>().join(" ");
    CheckReport::new(
        "",
        r2 > 0.95 && within,
        format!(
            "seconds [{}] R^2 {r2:.4}; pdist [{}]; 10 steps {:.2}% above best",
            fmt(&secs, 2),
            fmt(&pd, 4),
            100.0 * (at10 / best - 1.0)
        ),
    )
}

fn determinism(run: &Run, first: &[u8]) -> alf_harness::Result<CheckReport> {
    let mut again = run.config.clone();
    again.run.threads = if run.config.worker_count() == 1 { 2 } else { 1 };
    sweep_to_files(&again)?;
    let second = std::fs::read(Layout::new(&again.run.out_dir).sweep_csv())
        .map_err(alf_harness::HarnessError::io(Layout::new(&again.run.out_dir).sweep_csv()))?;
    Ok(CheckReport::new(
        "",
        first == second.as_slice(),
        format!(
            "sha256 {} vs {} ({} worker threads on the rerun)",
            &sha_hex(first)[..16],
            &sha_hex(&second)[..16],
            again.worker_count()
        ),
    ))
}

/// The base codec's serialized bytes before and after auxiliary and fusion
/// training, both inside the pipeline and on a direct short retraining.
fn frozen_base(run: &Run) -> alf_harness::Result<CheckReport> {
    let config = &run.config;
    let beta = config.codec.betas[0];
    let layout = Layout::new(&config.run.out_dir);
    let base_path = layout.checkpoint(Stage::Base, beta);
    let recorded = run
        .manifest
        .stages
        .iter()
        .find(|s| s.stage == Stage::Base && s.beta == beta)
        .map(|s| s.sha256.clone())
        .unwrap_or_default();
    let on_disk = sha_hex(&std::fs::read(&base_path).map_err(alf_harness::HarnessError::io(&base_path))?);

    let models = load_models(&layout, beta)?;
    let base = models.base;
    let serialized = |b: &alf_core::codec::BaseCodec| -> alf_core::Result<[u8; 32]> {
        Ok(Checkpoint::from_bytes(&b.to_checkpoint(0, 0)?.to_bytes()?)?.component_digest(&BASE_PREFIXES))
    };
    let before = serialized(&base)?;
    let data = Data::load(config)?;
    let train = &data.train()[..256];
    let mut aux_opts = config.aux_options();
    aux_opts.steps = 20;
    let (aux, _) = train_aux_encoder(&base, train, &aux_opts)?;
    let after_aux = serialized(&base)?;
    let mut fusion_opts = config.fusion_options();
    fusion_opts.train.steps = 20;
    train_fusion(&base, &aux, train, &fusion_opts)?;
    let after_fusion = serialized(&base)?;

    let pipeline_ok = !recorded.is_empty() && recorded == on_disk;
    let direct_ok = before == after_aux && before == after_fusion && base.digest() == before;
    Ok(CheckReport::new(
        "",
        pipeline_ok && direct_ok,
        format!(
            "pipeline base checkpoint {} after all stages (recorded {}); direct retraining digest {} before, {} after aux, {} after fusion",
            &on_disk[..16],
            &recorded[..recorded.len().min(16)],
            &sha_hex(&before)[..16],
            &sha_hex(&after_aux)[..16],
            &sha_hex(&after_fusion)[..16]
        ),
    ))
}

fn main() -> ExitCode {
    let mut reports = vec![
        timed("1 algebra", Duration::from_secs(10), || checks::algebra_suite(100, 0)),
        timed("3 coding", Duration::from_secs(60), || checks::coding_suite(1000, 0)),
        timed("4 gradients", Duration::from_secs(120), || checks::gradient_suite(3)),
        timed("7 bd-rate oracle", Duration::from_secs(60), || checks::bd_oracle_suite(0)),
    ];
    for r in &reports {
        println!("{r}");
    }

    let trained = train_toy();
    let sweep_out = trained.as_ref().map_err(|e| e.to_string()).and_then(|run| {
        let out = sweep_to_files(&run.config).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(Layout::new(&run.config.run.out_dir).sweep_csv()).map_err(|e| e.to_string())?;
        Ok((out, bytes))
    });
    let mut later = Vec::new();
    match (&trained, &sweep_out) {
        (Ok(run), Ok((out, bytes))) => {
            later.push(timed("2 pass-through", Duration::from_secs(60), || {
                pass_through(run).unwrap_or_else(|e| failed("", e))
            }));
            let mut t = trend(run, out);
            t.name = "5 trend".into();
            later.push(t);
            let mut s = step_ablation(run, out);
            s.name = "6 step ablation".into();
            later.push(s);
            let mut d = determinism(run, bytes).unwrap_or_else(|e| failed("", e));
            d.name = "8 determinism".into();
            later.push(d);
            let mut f = frozen_base(run).unwrap_or_else(|e| failed("", e));
            f.name = "9 frozen base".into();
            later.push(f);
        }
        (Err(e), _) => {
            for name in ["2 pass-through", "5 trend", "6 step ablation", "8 determinism", "9 frozen base"] {
                later.push(failed(name, format!("toy pipeline: {e}")));
            }
        }
        (Ok(_), Err(e)) => {
            for name in ["2 pass-through", "5 trend", "6 step ablation", "8 determinism", "9 frozen base"] {
                later.push(failed(name, format!("sweep: {e}")));
            }
        }
    }
    for r in &later {
        println!("{r}");
    }
    reports.extend(later);
    reports.sort_by_key(|r| r.name.split(' ').next().and_then(|n| n.parse::<u32>().ok()));

    println!("\nacceptance summary");
    for r in &reports {
        println!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.name);
    }
    if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
