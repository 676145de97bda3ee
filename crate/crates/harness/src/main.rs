use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alf_core::codec::Bitstream;
use alf_core::fusion::{decode_controlled, SamplerConfig};
use alf_core::metrics::{bd_rate, QualityField, RdCurve};
use alf_harness::checks;
use alf_harness::config::ExperimentConfig;
use alf_harness::dataset::{gen_dataset, load_image, save_png};
use alf_harness::pipeline::{load_base, load_fusion, run_stages, Layout, Stage};
use alf_harness::sweep::{read_rows, sweep_to_files};
use alf_harness::{report, HarnessError, Result};
use clap::{Arg, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};

/// Adaptive latent fusion codec laboratory.
///
/// Every configuration key can be set with a `--section.key VALUE` flag,
/// which wins over the `--config` file and the `ALF_SEED` variable.
#[derive(Parser)]
#[command(name = "alf", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic image set (data.seed, data.count, data.size) as PNG.
    GenData { dir: PathBuf },
    /// Train the base codec for every beta.
    TrainBase,
    /// Train the auxiliary encoder (and the base codec if needed).
    TrainAux,
    /// Train the fusion module (and earlier stages if needed).
    TrainFusion,
    /// Run every stage including the translator baseline.
    Run,
    /// Compress one image with the base codec.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Which trained rate weight to use; defaults to the first.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Decode a bitstream with the fusion sampler.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// 1 reproduces the base decoder, 0 the full perceptual latent.
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// Sampler steps; defaults to sweep.default_steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Evaluate the held-out set over the tau and steps grids.
    Sweep,
    /// BD-rate between two curves selected from sweep CSVs.
    Bdrate {
        anchor: PathBuf,
        test: PathBuf,
        /// psnr, ssim or pdist.
        #[arg(long, default_value = "psnr")]
        field: QualityField,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        anchor_tau: Option<f64>,
        #[arg(long)]
        test_tau: Option<f64>,
    },
    /// SVG plots and the BD table from sweep CSVs.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(short, long, default_value = "report")]
        output: PathBuf,
    },
    /// Quick internal consistency checks.
    Selftest,
}

fn config_flags() -> Vec<Arg> {
    ExperimentConfig::keys()
        .into_iter()
        .map(|(key, default)| {
            Arg::new(key.clone())
                .long(key)
                .global(true)
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .help_heading("Configuration")
                .help(format!("default {default}"))
        })
        .collect()
}

fn overrides(matches: &ArgMatches) -> Vec<(String, String)> {
    ExperimentConfig::keys()
        .into_iter()
        .filter_map(|(key, _)| matches.get_one::<String>(&key).map(|v| (key, v.clone())))
        .collect()
}

fn beta_or_first(config: &ExperimentConfig, beta: Option<f64>) -> Result<f64> {
    match beta {
        Some(b) if config.codec.betas.contains(&b) => Ok(b),
        Some(b) => Err(HarnessError::Config(format!("beta {b} is not in codec.betas"))),
        None => Ok(config.codec.betas[0]),
    }
}

fn curve(path: &Path, label: Option<&str>, tau: Option<f64>) -> Result<RdCurve> {
    let rows: Vec<_> = read_rows(path)?
        .into_iter()
        .filter(|r| label.is_none_or(|l| r.label == l) && tau.is_none_or(|t| r.tau == t))
        .collect();
    let first = rows.first().ok_or_else(|| HarnessError::Config(format!("no matching rows in {}", path.display())))?;
    if rows.iter().any(|r| r.label != first.label || r.tau != first.tau) {
        return Err(HarnessError::Config(format!(
            "{} holds several curves; select one with --label and the tau flags",
            path.display()
        )));
    }
    let name = format!("{} tau={}", first.label, first.tau);
    Ok(RdCurve::new(name, rows.iter().map(|r| r.point()).collect())?)
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<bool> {
    let load = || ExperimentConfig::load(cli.config.as_deref(), &overrides(matches));
    match cli.command {
        Command::GenData { dir } => {
            let c = load()?;
            let files = gen_dataset(&dir, c.data.seed, c.data.count, c.data.size)?;
            println!("wrote {} images to {}", files.len(), dir.display());
        }
        Command::TrainBase | Command::TrainAux | Command::TrainFusion | Command::Run => {
            let last = match cli.command {
                Command::TrainBase => Stage::Base,
                Command::TrainAux => Stage::Aux,
                Command::TrainFusion => Stage::Fusion,
                _ => Stage::Variant1,
            };
            let manifest = run_stages(&load()?, last)?;
            for s in &manifest.stages {
                let how = if s.cached { "cached" } else { "trained" };
                println!("{:<9} beta {:<6} {how:<7} {:>8.1}s  {}", s.stage.name(), s.beta, s.seconds, s.path.display());
            }
        }
        Command::Encode { input, output, beta } => {
            let c = load()?;
            let base = load_base(&Layout::new(&c.run.out_dir), beta_or_first(&c, beta)?)?;
            let img = load_image(&input)?;
            let bits = base.compress(&img)?;
            std::fs::write(&output, bits.to_bytes()).map_err(HarnessError::io(&output))?;
            let pixels = (img.shape()[1] * img.shape()[2]) as f64;
            println!("{} bytes, {:.4} bpp", bits.to_bytes().len(), bits.payload_bits() as f64 / pixels);
        }
        Command::Decode {
            input,
            output,
            tau,
            steps,
            seed,
            beta,
        } => {
            let c = load()?;
            let layout = Layout::new(&c.run.out_dir);
            let beta = beta_or_first(&c, beta)?;
            let (base, fusion) = (load_base(&layout, beta)?, load_fusion(&layout, beta)?);
            let bytes = std::fs::read(&input).map_err(HarnessError::io(&input))?;
            let bits = Bitstream::from_bytes(&bytes)?;
            let cfg = SamplerConfig {
                steps: steps.unwrap_or(c.sweep.default_steps),
                tau,
                seed,
            };
            let img = decode_controlled(&bits, &cfg, 0, &base, &fusion)?;
            save_png(&output, &img)?;
        }
        Command::Sweep => {
            let c = load()?;
            let out = sweep_to_files(&c)?;
            println!("{} rows -> {}", out.rows.len(), Layout::new(&c.run.out_dir).sweep_csv().display());
        }
        Command::Bdrate {
            anchor,
            test,
            field,
            label,
            anchor_tau,
            test_tau,
        } => {
            let a = curve(&anchor, label.as_deref(), anchor_tau)?;
            let t = curve(&test, label.as_deref(), test_tau)?;
            let v = bd_rate(&a, &t, field)?;
            println!("BD-rate ({}) of {:?} vs {:?}: {v:+.2}%", field.name(), t.label, a.label);
        }
        Command::Report { csv, output } => {
            let out = report(&csv, &output)?;
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            for n in &out.notices {
                println!("note: {n}");
            }
        }
        Command::Selftest => {
            let results = [
                checks::algebra_suite(100, 0),
                checks::coding_suite(1000, 0),
                checks::gradient_suite(1),
                checks::bd_oracle_suite(0),
            ];
            for r in &results {
                println!("{r}");
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().args(config_flags()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, &matches) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
