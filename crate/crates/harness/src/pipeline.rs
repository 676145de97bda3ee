//! Training orchestration with content-addressed stage caching.
//!
//! Every stage writes one checkpoint whose metadata carries a `stage_key`: a
//! SHA-256 over the stage name, its options, the training data and the
//! checkpoints it depends on. A stage is skipped when its checkpoint exists
//! with the expected key, so editing one stage's options or deleting its file
//! re-runs that stage and everything downstream of it, nothing else.

use std::path::{Path, PathBuf};
use std::time::Instant;

use alf_core::codec::{train_base, BaseCodec, Checkpoint, TrainLog, BASE_PREFIXES};
use alf_core::data::split_held_out;
use alf_core::fusion::{train_aux_encoder, train_fusion, train_variant1, AuxEncoder, FusionModel, Variant1Model};
use alf_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{hex_digest, ExperimentConfig};
use crate::dataset::load_dataset;
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Aux,
    Fusion,
    Variant1,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Base, Stage::Aux, Stage::Fusion, Stage::Variant1];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Aux => "aux",
            Stage::Fusion => "fusion",
            Stage::Variant1 => "variant1",
        }
    }
}

/// Where a run keeps its files.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn checkpoint(&self, stage: Stage, beta: f64) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}_b{beta}.alfc", stage.name()))
    }

    pub fn train_log(&self, stage: Stage, beta: f64) -> PathBuf {
        self.root.join("logs").join(format!("{}_b{beta}.csv", stage.name()))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }

    pub fn timing_csv(&self) -> PathBuf {
        self.root.join("timing.csv")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub beta: f64,
    pub key: String,
    pub path: PathBuf,
    pub sha256: String,
    pub cached: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub first_index: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub data_digest: String,
    pub held_out: HeldOut,
    pub stages: Vec<StageRecord>,
    pub outputs: Vec<OutputRecord>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    /// Add or refresh the entry for `path`.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let sha256 = file_sha(path)?;
        self.outputs.retain(|o| o.path != path);
        self.outputs.push(OutputRecord {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn all_cached(&self) -> bool {
        self.stages.iter().all(|s| s.cached)
    }
}

pub(crate) fn file_sha(path: &Path) -> Result<String> {
    Ok(hex_digest(&std::fs::read(path).map_err(HarnessError::io(path))?))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(HarnessError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(HarnessError::io(path))
}

/// SHA-256 over the raw pixel values of a dataset.
pub fn data_digest(images: &[Tensor]) -> String {
    let mut bytes = Vec::new();
    for img in images {
        for d in img.shape() {
            bytes.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in img.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    hex_digest(&bytes)
}

/// The generated or loaded images with the fixed held-out split.
pub struct Data {
    pub images: Vec<Tensor>,
    pub digest: String,
}

impl Data {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let images = load_dataset(&config.data)?;
        if images.len() < 2 {
            return Err(HarnessError::Config(format!(
                "the pipeline needs at least 2 images, the dataset has {}",
                images.len()
            )));
        }
        let digest = data_digest(&images);
        Ok(Data { images, digest })
    }

    pub fn train(&self) -> &[Tensor] {
        split_held_out(&self.images).0
    }

    pub fn held_out(&self) -> &[Tensor] {
        split_held_out(&self.images).1
    }

    pub fn held_out_range(&self) -> HeldOut {
        let count = self.held_out().len();
        HeldOut {
            first_index: self.images.len() - count,
            count,
        }
    }
}

fn stage_key(stage: Stage, inputs: serde_json::Value) -> String {
    let body = json!({ "stage": stage.name(), "inputs": inputs });
    hex_digest(body.to_string().as_bytes())
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &log.records {
        w.serialize(r).map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    write_atomic(path, &bytes)
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    layout: Layout,
    data: &'a Data,
    records: Vec<StageRecord>,
    outputs: Vec<PathBuf>,
}

impl Runner<'_> {
    /// Load the stage's checkpoint if its key matches, else train and save.
    fn stage(
        &mut self,
        stage: Stage,
        beta: f64,
        inputs: serde_json::Value,
        train: impl FnOnce() -> alf_core::Result<(Checkpoint, TrainLog)>,
    ) -> Result<(Checkpoint, String)> {
        let key = stage_key(stage, inputs);
        let path = self.layout.checkpoint(stage, beta);
        let started = Instant::now();
        let cached = Checkpoint::load(&path)
            .ok()
            .filter(|c| c.meta_as::<String>("stage_key").ok().as_deref() == Some(key.as_str()));
        let (ckpt, was_cached) = match cached {
            Some(c) => {
                log::info!("{} beta {beta}: cached", stage.name());
                (c, true)
            }
            None => {
                log::info!("{} beta {beta}: training", stage.name());
                let wrap = |source| HarnessError::Stage {
                    stage: stage.name(),
                    beta,
                    source,
                };
                let (ckpt, log) = train().map_err(wrap)?;
                let ckpt = ckpt.with_meta("stage_key", key.clone());
                write_atomic(&path, &ckpt.to_bytes().map_err(wrap)?)?;
                let log_path = self.layout.train_log(stage, beta);
                write_log(&log_path, &log)?;
                (ckpt, false)
            }
        };
        let sha = file_sha(&path)?;
        let log_path = self.layout.train_log(stage, beta);
        if log_path.exists() {
            self.outputs.push(log_path);
        }
        self.outputs.push(path.clone());
        self.records.push(StageRecord {
            stage,
            beta,
            key,
            path,
            sha256: sha.clone(),
            cached: was_cached,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok((ckpt, sha))
    }

    /// Stages of one β up to and including `last`.
    fn run_beta(&mut self, beta: f64, last: Stage) -> Result<()> {
        let config = self.config;
        let data_ref: &Data = self.data;
        let train = data_ref.train();
        let data = self.data.digest.clone();
        let codec_config = config.codec_config(beta);
        let base_opts = config.base_options();
        let (base_ckpt, base_sha) = self.stage(
            Stage::Base,
            beta,
            json!({ "data": data, "codec": codec_config, "train": base_opts }),
            || {
                let (base, log) = train_base(train, &codec_config, &base_opts)?;
                Ok((base.to_checkpoint(base_opts.seed, base_opts.steps)?, log))
            },
        )?;
        let base = BaseCodec::from_checkpoint(&base_ckpt)?;
        let frozen = base_ckpt.component_digest(&BASE_PREFIXES);
        if last == Stage::Base {
            return Ok(());
        }

        let aux_opts = config.aux_options();
        let (aux_ckpt, aux_sha) = self.stage(
            Stage::Aux,
            beta,
            json!({ "data": data, "base": base_sha, "train": aux_opts }),
            || {
                let (aux, log) = train_aux_encoder(&base, train, &aux_opts)?;
                Ok((aux.to_checkpoint()?, log))
            },
        )?;
        let aux = AuxEncoder::from_checkpoint(&aux_ckpt)?;
        if last == Stage::Aux {
            return self.check_frozen(beta, &base, frozen);
        }

        let fusion_opts = config.fusion_options();
        self.stage(
            Stage::Fusion,
            beta,
            json!({
                "data": data,
                "base": base_sha,
                "aux": aux_sha,
                "lambda": fusion_opts.lambda,
                "schedule": fusion_opts.schedule,
                "denoiser": fusion_opts.denoiser,
                "train": fusion_opts.train,
            }),
            || {
                let (fusion, log) = train_fusion(&base, &aux, train, &fusion_opts)?;
                Ok((fusion.to_checkpoint()?, log))
            },
        )?;
        if last == Stage::Fusion {
            return self.check_frozen(beta, &base, frozen);
        }

        let v1_opts = config.variant1_options();
        let v1_net = config.denoiser_config();
        self.stage(
            Stage::Variant1,
            beta,
            json!({ "data": data, "base": base_sha, "denoiser": v1_net, "train": v1_opts }),
            || {
                let (v1, log) = train_variant1(&base, train, &v1_net, &v1_opts)?;
                Ok((v1.to_checkpoint()?, log))
            },
        )?;
        self.check_frozen(beta, &base, frozen)
    }

    /// The base checkpoint on disk and in memory still hash to `frozen`.
    fn check_frozen(&self, beta: f64, base: &BaseCodec, frozen: [u8; 32]) -> Result<()> {
        let after = Checkpoint::load(self.layout.checkpoint(Stage::Base, beta))?.component_digest(&BASE_PREFIXES);
        if after != frozen || base.digest() != frozen {
            return Err(HarnessError::Core(alf_core::Error::Contract(format!(
                "base codec for beta {beta} changed during later stages"
            ))));
        }
        Ok(())
    }
}

/// Train base, auxiliary encoder, fusion module and the translator baseline
/// for every β, reusing checkpoints whose inputs are unchanged, and write the
/// run manifest.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunManifest> {
    run_stages(config, Stage::Variant1)
}

/// [`run_pipeline`] stopping after `last`.
pub fn run_stages(config: &ExperimentConfig, last: Stage) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let data = Data::load(config)?;
    let mut runner = Runner {
        config,
        layout: Layout::new(&config.run.out_dir),
        data: &data,
        records: Vec::new(),
        outputs: Vec::new(),
    };
    for &beta in &config.codec.betas {
        runner.run_beta(beta, last)?;
    }
    let mut manifest = RunManifest {
        config_hash: config.hash(),
        data_digest: data.digest.clone(),
        held_out: data.held_out_range(),
        stages: runner.records,
        outputs: Vec::new(),
        seconds: started.elapsed().as_secs_f64(),
    };
    for path in &runner.outputs {
        manifest.record_output(path)?;
    }
    manifest.save(&runner.layout.manifest())?;
    Ok(manifest)
}

/// The trained models for one β.
pub struct Models {
    pub base: BaseCodec,
    pub fusion: FusionModel,
    pub variant1: Variant1Model,
}

fn require(layout: &Layout, stage: Stage, beta: f64) -> Result<Checkpoint> {
    let path = layout.checkpoint(stage, beta);
    if !path.is_file() {
        return Err(HarnessError::MissingCheckpoint {
            stage: stage.name(),
            beta,
            path,
        });
    }
    Ok(Checkpoint::load(&path)?)
}

pub fn load_base(layout: &Layout, beta: f64) -> Result<BaseCodec> {
    Ok(BaseCodec::from_checkpoint(&require(layout, Stage::Base, beta)?)?)
}

pub fn load_fusion(layout: &Layout, beta: f64) -> Result<FusionModel> {
    Ok(FusionModel::from_checkpoint(&require(layout, Stage::Fusion, beta)?)?)
}

pub fn load_models(layout: &Layout, beta: f64) -> Result<Models> {
    Ok(Models {
        base: load_base(layout, beta)?,
        fusion: load_fusion(layout, beta)?,
        variant1: Variant1Model::from_checkpoint(&require(layout, Stage::Variant1, beta)?)?,
    })
}
