use std::path::PathBuf;

use crate::app::pgm::{encode_f32, encode_pgm};
use crate::app::{load_compatible, load_dataset_split, write_config, write_file};
use crate::config::{RunConfig, Split};
use crate::diffusion::{sample_split, InferenceConfig};
use crate::dit::DenoiserState;
use crate::error::Result;
use crate::features::record::record_file_name;
use crate::features::DatasetSample;
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub dir: PathBuf,
    pub count: usize,
}

/// Predicted maps in `[0, 1]` with `steps` denoising steps; sample `i`
/// draws its noise from `seed + i`.
pub fn predict(
    state: &DenoiserState,
    samples: &[DatasetSample],
    cfg: &RunConfig,
    steps: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let sched = cfg.train.schedule()?;
    sample_split(
        state,
        samples,
        &sched,
        InferenceConfig { steps, seed },
        cfg.train.target_range,
    )
}

/// Prediction file stem for sample `i`.
pub(crate) fn sample_id(i: usize) -> String {
    record_file_name(i)
        .split('.')
        .next()
        .unwrap_or_default()
        .to_string()
}

/// Writes `<id>.pgm` and `<id>.f32` for every sample of `cfg.sample_split`
/// under `paths.predictions/<split>`.
pub fn sample(cfg: &RunConfig) -> Result<SampleOutcome> {
    cfg.validate()?;
    let split: Split = cfg.sample_split;
    let state = load_compatible(cfg, &cfg.paths.checkpoint_path())?;
    let samples = load_dataset_split(cfg, split)?;
    let maps = predict(&state, &samples, cfg, cfg.steps, cfg.seed)?;
    let dir = cfg.paths.predictions_dir().join(split.as_str());
    for (i, m) in maps.iter().enumerate() {
        let id = sample_id(i);
        write_file(&dir.join(format!("{id}.pgm")), &encode_pgm(m)?)?;
        write_file(&dir.join(format!("{id}.f32")), &encode_f32(m))?;
    }
    write_config(&dir, cfg)?;
    Ok(SampleOutcome {
        dir,
        count: maps.len(),
    })
}
