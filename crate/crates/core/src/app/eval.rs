use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::app::pgm::{decode_f32, decode_pgm};
use crate::app::sample::sample_id;
use crate::app::{load_dataset_split, write_file};
use crate::config::{RunConfig, Split};
use crate::error::{Error, Result};
use crate::features::DatasetSample;
use crate::metrics::{evaluate, mean_scores, metrics_csv, MetricScores};
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub rows: Vec<(String, MetricScores)>,
    pub mean: MetricScores,
    /// Samples with at least one undefined metric.
    pub degenerate: Vec<String>,
    pub csv: PathBuf,
}

/// The `f32` sidecar when present, else the PGM; `None` when neither exists.
pub fn read_prediction(dir: &Path, id: &str, h: usize, w: usize) -> Result<Option<Tensor>> {
    let raw = dir.join(format!("{id}.f32"));
    if raw.is_file() {
        let buf = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        return decode_f32(&buf, h, w).map(Some);
    }
    let pgm = dir.join(format!("{id}.pgm"));
    if pgm.is_file() {
        let buf = fs::read(&pgm).map_err(|e| Error::io(&pgm, e))?;
        let m = decode_pgm(&buf)?;
        if m.shape() != [h, w] {
            return Err(Error::Format(format!(
                "{}: {:?} map, expected [{h}, {w}]",
                pgm.display(),
                m.shape()
            )));
        }
        return Ok(Some(m));
    }
    Ok(None)
}

pub fn evaluate_maps(preds: &[Tensor], samples: &[DatasetSample]) -> Result<Vec<MetricScores>> {
    if preds.len() != samples.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    preds
        .par_iter()
        .zip(samples.par_iter())
        .map(|(p, s)| evaluate(p, &s.gt_map, &s.fixations))
        .collect()
}

/// Scores the predictions in `pred_dir` (default
/// `paths.predictions/<split>`) against `split`, writing `metrics.csv`
/// there.
pub fn eval(cfg: &RunConfig, pred_dir: Option<&Path>, split: Split) -> Result<EvalOutcome> {
    let dir = pred_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.predictions_dir().join(split.as_str()));
    let samples = load_dataset_split(cfg, split)?;
    let mut preds = Vec::with_capacity(samples.len());
    let mut missing = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.gt_map.shape()[0], s.gt_map.shape()[1]);
        match read_prediction(&dir, &sample_id(i), h, w)? {
            Some(m) => preds.push(m),
            None => missing.push(sample_id(i)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "{} of {} predictions missing in {}: {}",
            missing.len(),
            samples.len(),
            dir.display(),
            missing.join(", ")
        )));
    }
    let scores = evaluate_maps(&preds, &samples)?;
    let rows: Vec<(String, MetricScores)> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| (sample_id(i), *s))
        .collect();
    let degenerate = rows
        .iter()
        .filter(|(_, s)| s.sim.is_none() || s.cc.is_none() || s.nss.is_none() || s.auc_j.is_none())
        .map(|(id, _)| id.clone())
        .collect();
    let csv = dir.join("metrics.csv");
    write_file(&csv, metrics_csv(&rows).as_bytes())?;
    Ok(EvalOutcome {
        mean: mean_scores(&scores),
        rows,
        degenerate,
        csv,
    })
}
