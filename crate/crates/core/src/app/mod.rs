//! The pipeline behind the command-line verbs.

mod ablate;
mod eval;
mod generate;
pub mod pgm;
mod sample;
mod train;

use std::fs;
use std::path::Path;

pub use ablate::{ablate, AblationRow, AblationTable, Study};
pub use eval::{eval, evaluate_maps, read_prediction, EvalOutcome};
pub use generate::{generate, generate_split};
pub use sample::{predict, sample, SampleOutcome};
pub use train::{load_compatible, train, train_on, TrainOutcome};

use crate::config::{RunConfig, Split};
use crate::error::{Error, Result};
use crate::features::record::load_split;
use crate::features::DatasetSample;

/// File holding the effective configuration in every output directory.
pub const CONFIG_FILE: &str = "config.toml";

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())
}

/// Loads a split written by [`generate`], refusing a dataset made with
/// different data settings.
pub fn load_dataset_split(cfg: &RunConfig, split: Split) -> Result<Vec<DatasetSample>> {
    let dir = cfg.paths.dataset_dir();
    let on_disk = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let diff: Vec<String> = on_disk
        .diff(cfg)
        .into_iter()
        .filter(|d| d.starts_with("[data]"))
        .collect();
    if !diff.is_empty() || on_disk.seed != cfg.seed {
        let mut msg = format!("dataset at {} was generated with other settings", dir.display());
        if on_disk.seed != cfg.seed {
            msg.push_str(&format!("\n  [run] seed: {} != {}", on_disk.seed, cfg.seed));
        }
        for d in diff {
            msg.push_str(&format!("\n  {d}"));
        }
        return Err(Error::Config(msg));
    }
    load_split(&cfg.paths.split_dir(split))
}
