#![allow(dead_code)]

use std::path::Path;

use saldiff::config::RunConfig;

/// A configuration small enough to train in seconds.
pub const TINY: &str = "\
[data]
train_samples = 24
val_samples = 6
test_samples = 5

[model]
d_model = 16
heads = 2
depth = 1
mlp_ratio = 2
sitr_heads = 2
sitr_head_dim = 4

[train]
batch_size = 8
epochs = 2

[ablate]
seeds = 0
train_samples = 16
epochs = 1
";

pub fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_text(TINY).unwrap();
    cfg.paths.output = out.to_path_buf();
    cfg
}

pub fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}
