#![allow(dead_code)]

use std::path::Path;

use alf_harness::config::ExperimentConfig;

/// A run small enough to train every stage in well under a second.
pub const TINY: &str = r#"
[run]
seed = 3

[data]
seed = 5
count = 20
size = 16

[codec]
latent_channels = 4
hidden_channels = 8
num_downsamples = 2
betas = [0.1, 0.5]

[base]
steps = 4
batch_size = 2
learning_rate = 1e-3

[aux]
steps = 3
batch_size = 2
learning_rate = 1e-3

[fusion]
steps = 3
batch_size = 2
learning_rate = 1e-3
t_train = 20
num_units = 1
channels = 8
time_embed_dim = 4

[variant1]
steps = 3
batch_size = 2
learning_rate = 1e-3

[sweep]
taus = [0.0, 1.0]
steps = [1, 2]
default_steps = 2
seeds = [0]
batch = 1
"#;

pub fn write_tiny(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

pub fn tiny(dir: &Path) -> ExperimentConfig {
    let file = write_tiny(dir);
    let out = dir.join("run").to_string_lossy().into_owned();
    ExperimentConfig::load(Some(&file), &[("run.out_dir".into(), out)]).unwrap()
}
