use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::app::{
    evaluate_maps, load_compatible, load_dataset_split, predict, train, train_on, write_config,
    write_file,
};
use crate::config::{RunConfig, Split};
use crate::dit::{ConditioningMode, DenoiserState};
use crate::error::{Error, Result};
use crate::features::DatasetSample;
use crate::metrics::{mean_scores, MetricScores};
use crate::sitr::FusionStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    /// Denoising step counts on one checkpoint.
    Steps,
    /// Cross-attention conditioning against the pooled-embedding variant.
    Conditioning,
    /// SITR against the three text-fusion baselines.
    Fusion,
}

impl Study {
    pub fn as_str(self) -> &'static str {
        match self {
            Study::Steps => "steps",
            Study::Conditioning => "conditioning",
            Study::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(Study::Steps),
            "conditioning" => Ok(Study::Conditioning),
            "fusion" => Ok(Study::Fusion),
            _ => Err(Error::Argument(format!(
                "unknown study {s:?}; expected steps, conditioning or fusion"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    pub scores: MetricScores,
    pub reference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub study: Study,
    pub rows: Vec<AblationRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "degenerate".to_string(), |x| format!("{x:.4}"))
}

impl AblationTable {
    /// Seed-averaged scores of `arm`.
    pub fn mean(&self, arm: &str) -> Option<&MetricScores> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.seed.is_none())
            .map(|r| &r.scores)
    }

    pub fn arms(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.arm.as_str()) {
                out.push(&r.arm);
            }
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("arm,seed,reference,SIM,CC,NSS,AUCJ\n");
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            let s = &r.scores;
            let _ = writeln!(
                out,
                "{},{seed},{},{},{},{},{}",
                r.arm,
                if r.reference { "yes" } else { "no" },
                cell(s.sim),
                cell(s.cc),
                cell(s.nss),
                cell(s.auc_j)
            );
        }
        out
    }

    /// Seed-averaged rows only.
    pub fn markdown(&self) -> String {
        let mut out = format!("## {} ablation\n\n", self.study);
        out.push_str("| arm | SIM | CC | NSS | AUC-J |\n|---|---|---|---|---|\n");
        for r in self.rows.iter().filter(|r| r.seed.is_none()) {
            let s = &r.scores;
            let name = if r.reference {
                format!("{} (reference)", r.arm)
            } else {
                r.arm.clone()
            };
            let _ = writeln!(
                out,
                "| {name} | {} | {} | {} | {} |",
                cell(s.sim),
                cell(s.cc),
                cell(s.nss),
                cell(s.auc_j)
            );
        }
        out
    }
}

struct Arm {
    name: String,
    fusion: FusionStrategy,
    conditioning: ConditioningMode,
    reference: bool,
}

fn arms(study: Study) -> Vec<Arm> {
    let decoupled = ConditioningMode::Decoupled;
    match study {
        Study::Steps => Vec::new(),
        Study::Conditioning => [ConditioningMode::Decoupled, ConditioningMode::Undecoupled]
            .into_iter()
            .map(|c| Arm {
                name: c.to_string(),
                fusion: FusionStrategy::Sitr,
                conditioning: c,
                reference: c == decoupled,
            })
            .collect(),
        Study::Fusion => [
            FusionStrategy::Sitr,
            FusionStrategy::Concatenate,
            FusionStrategy::RepeatAdd,
            FusionStrategy::RepeatAverage,
        ]
        .into_iter()
        .map(|f| Arm {
            name: f.to_string(),
            fusion: f,
            conditioning: decoupled,
            reference: f == FusionStrategy::Sitr,
        })
        .collect(),
    }
}

/// Runs `study` and writes `ablate/<study>.md` and `.csv` under the output
/// directory. Arm checkpoints live in `ablate/arms/`; an existing one is
/// reused when its embedded config matches.
pub fn ablate(cfg: &RunConfig, study: Study) -> Result<AblationTable> {
    cfg.validate()?;
    let test = load_dataset_split(cfg, Split::Test)?;
    let rows = match study {
        Study::Steps => steps_rows(cfg, &test)?,
        _ => arm_rows(cfg, study, &test)?,
    };
    let table = AblationTable { study, rows };
    let dir = cfg.paths.output.join("ablate");
    write_file(&dir.join(format!("{study}.md")), table.markdown().as_bytes())?;
    write_file(&dir.join(format!("{study}.csv")), table.csv().as_bytes())?;
    write_config(&dir, cfg)?;
    Ok(table)
}

fn steps_rows(cfg: &RunConfig, test: &[DatasetSample]) -> Result<Vec<AblationRow>> {
    let path = cfg.paths.checkpoint_path();
    if !path.exists() {
        train(cfg)?;
    }
    let state = load_compatible(cfg, &path)?;
    let mut rows = Vec::new();
    for &s in &cfg.ablate.steps {
        let preds = predict(&state, test, cfg, s, cfg.seed)?;
        rows.push(AblationRow {
            arm: format!("S={s}"),
            seed: None,
            scores: mean_scores(&evaluate_maps(&preds, test)?),
            reference: s == cfg.steps,
        });
    }
    Ok(rows)
}

/// Config of one arm at one seed under the ablation budget.
fn arm_config(cfg: &RunConfig, arm: &Arm, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.model.fusion = arm.fusion;
    c.model.conditioning = arm.conditioning;
    c.train.epochs = cfg.ablate.epochs;
    c.train_samples = cfg.ablate.train_samples;
    c.set_seed(seed);
    c
}

fn arm_rows(cfg: &RunConfig, study: Study, test: &[DatasetSample]) -> Result<Vec<AblationRow>> {
    let train_set = load_dataset_split(cfg, Split::Train)?;
    let train_set = &train_set[..cfg.ablate.train_samples];
    let val = load_dataset_split(cfg, Split::Val)?;
    let dir = cfg.paths.output.join("ablate").join("arms");
    let mut rows = Vec::new();
    for arm in arms(study) {
        let mut per_seed = Vec::new();
        for &seed in &cfg.ablate.seeds {
            let c = arm_config(cfg, &arm, seed);
            let stem = format!("{}-{}-seed{seed}", arm.fusion, arm.conditioning);
            let ckpt: PathBuf = dir.join(format!("{stem}.ckpt"));
            let state: DenoiserState = if ckpt.exists() {
                load_compatible(&c, &ckpt)?
            } else {
                log::info!("training arm {stem}");
                let log_path = dir.join(format!("{stem}.log.csv"));
                train_on(&c, train_set, &val, &ckpt, Some(&log_path))?.0
            };
            let preds = predict(&state, test, &c, c.steps, seed)?;
            let scores = mean_scores(&evaluate_maps(&preds, test)?);
            per_seed.push(scores);
            rows.push(AblationRow {
                arm: arm.name.clone(),
                seed: Some(seed),
                scores,
                reference: arm.reference,
            });
        }
        rows.push(AblationRow {
            arm: arm.name.clone(),
            seed: None,
            scores: mean_scores(&per_seed),
            reference: arm.reference,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(cc: f64) -> MetricScores {
        MetricScores {
            sim: Some(0.5),
            cc: Some(cc),
            nss: None,
            auc_j: Some(0.9),
        }
    }

    #[test]
    fn study_names() {
        for s in [Study::Steps, Study::Conditioning, Study::Fusion] {
            assert_eq!(s.as_str().parse::<Study>().unwrap(), s);
        }
        let err = "noise".parse::<Study>().unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn fusion_arms_flag_sitr() {
        let a = arms(Study::Fusion);
        assert_eq!(a.len(), 4);
        assert_eq!(a.iter().filter(|x| x.reference).count(), 1);
        assert_eq!(a[0].name, "sitr");
        assert!(a[0].reference);
        assert_eq!(arms(Study::Conditioning).len(), 2);
    }

    #[test]
    fn table_layout() {
        let t = AblationTable {
            study: Study::Fusion,
            rows: vec![
                AblationRow {
                    arm: "sitr".into(),
                    seed: Some(0),
                    scores: scores(0.8),
                    reference: true,
                },
                AblationRow {
                    arm: "sitr".into(),
                    seed: None,
                    scores: scores(0.8),
                    reference: true,
                },
                AblationRow {
                    arm: "concatenate".into(),
                    seed: None,
                    scores: scores(0.7),
                    reference: false,
                },
            ],
        };
        let csv = t.csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("sitr,mean,yes,0.5000,0.8000,degenerate,0.9000"));
        let md = t.markdown();
        assert!(md.contains("| sitr (reference) |"));
        assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 3);
        assert_eq!(t.mean("concatenate").unwrap().cc, Some(0.7));
        assert_eq!(t.arms(), vec!["sitr", "concatenate"]);
    }

    #[test]
    fn arm_config_uses_budget() {
        let cfg = RunConfig::default();
        let arm = &arms(Study::Conditioning)[1];
        let c = arm_config(&cfg, arm, 2);
        assert_eq!(c.seed, 2);
        assert_eq!(c.train.seed, 2);
        assert_eq!(c.train.epochs, cfg.ablate.epochs);
        assert_eq!(c.train_samples, cfg.ablate.train_samples);
        assert_eq!(c.model.conditioning, ConditioningMode::Undecoupled);
        c.validate().unwrap();
    }
}
