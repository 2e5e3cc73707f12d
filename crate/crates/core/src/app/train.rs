use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::app::{load_dataset_split, write_config, write_file};
use crate::config::{RunConfig, Split};
use crate::diffusion::{fit, TrainReport};
use crate::dit::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint};
use crate::dit::DenoiserState;
use crate::error::{Error, Result};
use crate::features::DatasetSample;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains on the dataset named by `cfg`, keeping the best-validation
/// weights at `paths.checkpoint`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = load_dataset_split(cfg, Split::Train)?;
    let val = load_dataset_split(cfg, Split::Val)?;
    write_config(&cfg.paths.output, cfg)?;
    let checkpoint = cfg.paths.checkpoint_path();
    let log = cfg.paths.output.join("train_log.csv");
    let (_, report) = train_on(cfg, &train, &val, &checkpoint, Some(&log))?;
    Ok(TrainOutcome {
        report,
        checkpoint,
        log,
    })
}

/// Fits a fresh model and returns the best checkpoint as reloaded from
/// disk. On a numeric failure the current weights are kept next to the
/// checkpoint with a `.failed` suffix.
pub fn train_on(
    cfg: &RunConfig,
    train: &[DatasetSample],
    val: &[DatasetSample],
    checkpoint: &Path,
    log: Option<&Path>,
) -> Result<(DenoiserState, TrainReport)> {
    let mut state = DenoiserState::init(&cfg.model, cfg.seed)?;
    let text = cfg.to_text();
    let start = Instant::now();
    let mut lines = String::from("epoch,train_loss,val_loss,lr,seconds\n");
    let result = fit(&mut state, train, val, &cfg.train, |e, st, best| {
        let _ = writeln!(
            lines,
            "{},{},{},{},{:.1}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.lr,
            start.elapsed().as_secs_f64()
        );
        if let Some(path) = log {
            write_file(path, lines.as_bytes())?;
        }
        log::info!(
            "epoch {} train {:.6} val {:.6} lr {:.2e}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.lr
        );
        if best {
            if let Some(dir) = checkpoint.parent() {
                std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
            }
            save_checkpoint(checkpoint, st, &text)?;
        }
        Ok(())
    });
    match result {
        Ok(report) => {
            let (best, _) = load_checkpoint(checkpoint)?;
            Ok((best, report))
        }
        Err(e @ Error::Numeric(_)) => {
            let mut failed = checkpoint.as_os_str().to_owned();
            failed.push(".failed");
            write_file(Path::new(&failed), &encode_checkpoint(&state, &text))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// Loads a checkpoint and refuses it when it was trained under settings
/// that differ from `cfg`.
pub fn load_compatible(cfg: &RunConfig, path: &Path) -> Result<DenoiserState> {
    let (state, embedded) = load_checkpoint(path)?;
    let theirs = RunConfig::from_text(&embedded)
        .map_err(|e| Error::Format(format!("{}: embedded config: {e}", path.display())))?;
    let diff = cfg.diff(&theirs);
    if !diff.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different config (ours != checkpoint):\n  {}",
            path.display(),
            diff.join("\n  ")
        )));
    }
    if state.cfg != cfg.model {
        return Err(Error::Format(format!(
            "checkpoint {} holds a model inconsistent with its own config",
            path.display()
        )));
    }
    Ok(state)
}
