use std::fs;

use rayon::prelude::*;

use crate::app::write_config;
use crate::config::{RunConfig, Split};
use crate::error::{Error, Result};
use crate::features::record::{encode_record, record_file_name, write_manifest};
use crate::features::{generate_indexed, DatasetSample, SyntheticEncoders};

/// Samples of one split, generated in memory.
pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Vec<DatasetSample>> {
    let enc = SyntheticEncoders::new(&cfg.data.features)?;
    let base = cfg.split_seed(split);
    (0..cfg.split_size(split))
        .into_par_iter()
        .map(|i| generate_indexed(base, i, &enc, &cfg.data))
        .collect()
}

/// Writes the train, val and test splits with their manifests; returns the
/// sample count per split.
pub fn generate(cfg: &RunConfig) -> Result<Vec<(Split, usize)>> {
    cfg.validate()?;
    let root = cfg.paths.dataset_dir();
    let mut counts = Vec::new();
    for split in Split::ALL {
        let dir = cfg.paths.split_dir(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let samples = generate_split(cfg, split)?;
        let encoded: Vec<Vec<u8>> = samples.par_iter().map(encode_record).collect();
        let mut names = Vec::with_capacity(encoded.len());
        for (i, bytes) in encoded.iter().enumerate() {
            let name = record_file_name(i);
            let path = dir.join(&name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            names.push(name);
        }
        write_manifest(&dir, &names)?;
        counts.push((split, names.len()));
    }
    write_config(&root, cfg)?;
    Ok(counts)
}
