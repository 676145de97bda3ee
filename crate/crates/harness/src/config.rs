//! Experiment configuration: TOML file, `ALF_*` environment variables and
//! command-line overrides, applied in that order.

use std::path::{Path, PathBuf};

use alf_core::codec::{CodecConfig, LossKind, TrainOptions};
use alf_core::fusion::{DenoiserConfig, FusionOptions, SamplerConfig, ScheduleParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{HarnessError, Result};

pub const SEED_ENV: &str = "ALF_SEED";
pub const THREADS_ENV: &str = "ALF_THREADS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub codec: CodecSection,
    pub base: StageSection,
    pub aux: StageSection,
    pub fusion: FusionSection,
    pub variant1: StageSection,
    pub sweep: SweepSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seed of every training stage.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for evaluation; 0 uses every core.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    /// Directory of PNG/PPM images used instead of the synthetic set when
    /// non-empty.
    pub dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed: 0,
            count: 2000,
            size: 32,
            dir: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub num_downsamples: usize,
    pub loss_kind: LossKind,
    /// One base codec is trained per rate weight.
    pub betas: Vec<f64>,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            latent_channels: 16,
            hidden_channels: 32,
            num_downsamples: 3,
            loss_kind: LossKind::Distortion,
            betas: vec![0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for StageSection {
    fn default() -> Self {
        let t = TrainOptions::default();
        StageSection {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub num_units: usize,
    pub channels: usize,
    pub time_embed_dim: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        let f = FusionOptions::default();
        FusionSection {
            steps: 3000,
            batch_size: f.train.batch_size,
            learning_rate: f.train.learning_rate,
            lambda: f.lambda,
            t_train: f.schedule.t_train,
            beta_min: f.schedule.beta_min,
            beta_max: f.schedule.beta_max,
            num_units: f.denoiser.num_units,
            channels: f.denoiser.channels,
            time_embed_dim: f.denoiser.time_embed_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub taus: Vec<f64>,
    /// Sampler step counts evaluated at `τ = 0`.
    pub steps: Vec<usize>,
    /// Step count used for the τ sweep.
    pub default_steps: usize,
    pub seeds: Vec<u64>,
    /// Images per sampler batch. Changing it can move results in the last
    /// float bits, so runs meant to match byte for byte must share it.
    pub batch: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            taus: vec![0.0, 0.3, 0.5, 0.8, 1.0],
            steps: vec![1, 5, 10, 20, 40],
            default_steps: SamplerConfig::default().steps,
            seeds: vec![0],
            batch: 16,
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    /// Defaults, then `file`, then `ALF_SEED`, then `overrides`
    /// (`section.key`, raw value) pairs.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = Self::default().to_table()?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
            let parsed: Table = text
                .parse()
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            set_key(&mut table, "run.seed", &seed)?;
        }
        for (key, value) in overrides {
            set_key(&mut table, key, value)?;
        }
        let config: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    fn to_table(&self) -> Result<Table> {
        match Value::try_from(self) {
            Ok(Value::Table(t)) => Ok(t),
            Ok(_) => unreachable!("a struct serializes to a table"),
            Err(e) => Err(config_err(e.to_string())),
        }
    }

    /// Every settable key in `section.key` form, with its default value.
    pub fn keys() -> Vec<(String, Value)> {
        let table = Self::default().to_table().expect("defaults serialize");
        let mut out = Vec::new();
        for (section, body) in table {
            if let Value::Table(fields) = body {
                for (key, value) in fields {
                    out.push((format!("{section}.{key}"), value));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.codec;
        if c.betas.is_empty() {
            return Err(config_err("codec.betas must list at least one rate weight"));
        }
        for (i, b) in c.betas.iter().enumerate() {
            self.codec_config(*b).validate()?;
            if c.betas[..i].contains(b) {
                return Err(config_err(format!("codec.betas lists {b} twice")));
            }
        }
        if self.data.dir.as_os_str().is_empty() {
            let f = 1usize << c.num_downsamples.min(16);
            if self.data.size == 0 || !self.data.size.is_multiple_of(f) {
                return Err(config_err(format!(
                    "data.size {} must be a positive multiple of {f}",
                    self.data.size
                )));
            }
        } else if !self.data.dir.is_dir() {
            return Err(config_err(format!("data.dir {} is not a directory", self.data.dir.display())));
        }
        for (name, s) in [("base", &self.base), ("aux", &self.aux), ("variant1", &self.variant1)] {
            check_stage(name, s.batch_size, s.learning_rate)?;
        }
        check_stage("fusion", self.fusion.batch_size, self.fusion.learning_rate)?;
        if !(self.fusion.lambda >= 0.0) || !self.fusion.lambda.is_finite() {
            return Err(config_err(format!("fusion.lambda must be nonnegative, got {}", self.fusion.lambda)));
        }
        let schedule = self.schedule_params().build()?;
        self.denoiser_config().validate(c.latent_channels)?;
        let s = &self.sweep;
        if s.taus.is_empty() || s.taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(config_err(format!("sweep.taus must be non-empty values in [0, 1], got {:?}", s.taus)));
        }
        if s.seeds.is_empty() || s.batch == 0 {
            return Err(config_err("sweep.seeds must be non-empty and sweep.batch positive"));
        }
        for &steps in s.steps.iter().chain([&s.default_steps]) {
            SamplerConfig { steps, tau: 0.0, seed: 0 }.validate(&schedule)?;
        }
        Ok(())
    }

    pub fn codec_config(&self, beta: f64) -> CodecConfig {
        CodecConfig {
            latent_channels: self.codec.latent_channels,
            hidden_channels: self.codec.hidden_channels,
            num_downsamples: self.codec.num_downsamples,
            beta,
            loss_kind: self.codec.loss_kind,
        }
    }

    fn train_options(&self, s: &StageSection) -> TrainOptions {
        TrainOptions {
            steps: s.steps,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            seed: self.run.seed,
        }
    }

    pub fn base_options(&self) -> TrainOptions {
        self.train_options(&self.base)
    }

    pub fn aux_options(&self) -> TrainOptions {
        self.train_options(&self.aux)
    }

    pub fn variant1_options(&self) -> TrainOptions {
        self.train_options(&self.variant1)
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            t_train: self.fusion.t_train,
            beta_min: self.fusion.beta_min,
            beta_max: self.fusion.beta_max,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            num_units: self.fusion.num_units,
            channels: self.fusion.channels,
            time_embed_dim: self.fusion.time_embed_dim,
        }
    }

    pub fn fusion_options(&self) -> FusionOptions {
        let f = &self.fusion;
        FusionOptions {
            lambda: f.lambda,
            schedule: self.schedule_params(),
            denoiser: self.denoiser_config(),
            train: TrainOptions {
                steps: f.steps,
                batch_size: f.batch_size,
                learning_rate: f.learning_rate,
                seed: self.run.seed,
            },
        }
    }

    /// Evaluation workers: `run.threads` (0 meaning all cores), capped by
    /// `ALF_THREADS`.
    pub fn worker_count(&self) -> usize {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        let wanted = if self.run.threads == 0 { cores } else { self.run.threads };
        let cap = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(usize::MAX);
        wanted.min(cap).max(1)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)
    }
}

fn check_stage(name: &str, batch: usize, lr: f64) -> Result<()> {
    if batch == 0 || !(lr > 0.0) || !lr.is_finite() {
        return Err(config_err(format!(
            "{name}: batch_size must be positive and learning_rate a positive number"
        )));
    }
    Ok(())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Parse `raw` as a TOML value shaped like the key's current value. Bare
/// comma lists are accepted for arrays and unquoted text for strings.
fn set_key(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| config_err(format!("override {key:?} must look like section.key")))?;
    let slot = table
        .get_mut(section)
        .and_then(Value::as_table_mut)
        .and_then(|t| t.get_mut(field))
        .ok_or_else(|| config_err(format!("unknown configuration key {key:?}")))?;
    let text = match slot {
        Value::Array(_) if !raw.trim_start().starts_with('[') => format!("[{raw}]"),
        Value::String(_) if !raw.starts_with('"') => Value::String(raw.to_string()).to_string(),
        _ => raw.to_string(),
    };
    let parsed: Table = format!("v = {text}")
        .parse()
        .map_err(|e| config_err(format!("bad value {raw:?} for {key}: {e}")))?;
    let value = parsed.get("v").cloned().expect("parsed key");
    if std::mem::discriminant(&value) != std::mem::discriminant(slot)
        && !(slot.is_float() && value.is_integer())
    {
        return Err(config_err(format!("{key} expects a {}, got {raw:?}", slot.type_str())));
    }
    *slot = match (&*slot, value) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}
