//! The run configuration: a TOML file with one table per section covering
//! data, model, training, sampling, ablation and paths.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffusion::{InferenceConfig, TrainConfig};
use crate::dit::ModelConfig;
use crate::error::{Error, Result};
use crate::features::BlobWorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn ordinal(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Reduced training budget shared by every arm of an ablation study.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub train_samples: usize,
    pub epochs: usize,
    pub steps: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            train_samples: 1200,
            epochs: 12,
            steps: vec![2, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    /// Base for every relative path below.
    pub output: PathBuf,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output: PathBuf::from("."),
            dataset: PathBuf::from("dataset"),
            checkpoint: PathBuf::from("model.ckpt"),
            predictions: PathBuf::from("predictions"),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output.join(p)
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.resolve(&self.dataset)
    }

    pub fn split_dir(&self, split: Split) -> PathBuf {
        self.dataset_dir().join(split.as_str())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.resolve(&self.predictions)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: BlobWorldConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Map size and feature widths are taken from `data`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub steps: usize,
    pub sample_split: Split,
    pub ablate: AblationConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            data: BlobWorldConfig::default(),
            train_samples: 2000,
            val_samples: 200,
            test_samples: 200,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            steps: InferenceConfig::default().steps,
            sample_split: Split::Test,
            ablate: AblationConfig::default(),
            paths: Paths::default(),
        };
        cfg.sync();
        cfg
    }
}

const SECTIONS: [(&str, &[&str]); 7] = [
    ("run", &["seed"]),
    (
        "data",
        &[
            "train_samples",
            "val_samples",
            "test_samples",
            "map_h",
            "map_w",
            "min_objects",
            "max_objects",
            "sigma",
            "fixations",
            "intensity_jitter",
            "audio_noise",
            "frames",
            "grid_h",
            "grid_w",
            "visual_dim",
            "audio_dim",
            "text_dim",
            "num_types",
            "region_rows",
            "region_cols",
            "audio_rate_hz",
            "video_fps",
            "tone_base_hz",
            "tone_step_hz",
            "encoder_seed",
        ],
    ),
    (
        "model",
        &[
            "patch",
            "d_model",
            "heads",
            "depth",
            "mlp_ratio",
            "conditioning",
            "fusion",
            "sitr_heads",
            "sitr_head_dim",
        ],
    ),
    (
        "train",
        &[
            "learning_rate",
            "lr_decay_factor",
            "lr_patience",
            "batch_size",
            "epochs",
            "weight_decay",
            "grad_clip",
            "timesteps",
            "beta_min",
            "beta_max",
            "target_range",
        ],
    ),
    ("sample", &["steps", "split"]),
    ("ablate", &["seeds", "train_samples", "epochs", "steps"]),
    ("paths", &["output", "dataset", "checkpoint", "predictions"]),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

/// Keys whose value is a list.
const LIST_KEYS: [&str; 2] = ["seeds", "steps"];

/// Renders a TOML value the way `set` expects it: strings bare, numbers in
/// their usual form, arrays comma-joined.
pub(crate) fn value_text(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(x) => x.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(xs) => {
            let items: Result<Vec<String>> = xs
                .iter()
                .map(|x| match x {
                    toml::Value::Array(_) | toml::Value::Table(_) => {
                        Err(Error::Config(format!("{key}: nested values are not allowed")))
                    }
                    x => value_text(key, x),
                })
                .collect();
            items?.join(", ")
        }
        _ => return Err(Error::Config(format!("{key}: unsupported value {v}"))),
    })
}

/// Inverse of `value_text` for values produced by `get`.
pub(crate) fn toml_value(text: &str, list: bool) -> toml::Value {
    if list {
        return toml::Value::Array(text.split(',').map(|x| toml_value(x.trim(), false)).collect());
    }
    if let Ok(i) = text.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Some(x) = text.parse::<f64>().ok().filter(|x| x.is_finite()) {
        toml::Value::Float(x)
    } else {
        toml::Value::String(text.to_string())
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Copies the data-owned fields into the model config.
    fn sync(&mut self) {
        self.model.map_h = self.data.map_h;
        self.model.map_w = self.data.map_w;
        self.model.text_dim = self.data.features.text_dim;
        self.model.visual_dim = self.data.features.visual_dim;
        self.model.audio_dim = self.data.features.audio_dim;
        self.train.seed = self.seed;
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            steps: self.steps,
            seed: self.seed,
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
            Split::Test => self.test_samples,
        }
    }

    /// Base seed of a split; sample `i` uses `base + i`.
    pub fn split_seed(&self, split: Split) -> u64 {
        (self.seed << 36) | (split.ordinal() << 32)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync();
    }

    pub fn get(&self, section: &str, key: &str) -> Option<String> {
        let d = &self.data;
        let f = &d.features;
        let t = &self.train;
        Some(match (section, key) {
            ("run", "seed") => self.seed.to_string(),
            ("data", "train_samples") => self.train_samples.to_string(),
            ("data", "val_samples") => self.val_samples.to_string(),
            ("data", "test_samples") => self.test_samples.to_string(),
            ("data", "map_h") => d.map_h.to_string(),
            ("data", "map_w") => d.map_w.to_string(),
            ("data", "min_objects") => d.min_objects.to_string(),
            ("data", "max_objects") => d.max_objects.to_string(),
            ("data", "sigma") => d.sigma.to_string(),
            ("data", "fixations") => d.fixations.to_string(),
            ("data", "intensity_jitter") => d.intensity_jitter.to_string(),
            ("data", "audio_noise") => d.audio_noise.to_string(),
            ("data", "frames") => f.frames.to_string(),
            ("data", "grid_h") => f.grid_h.to_string(),
            ("data", "grid_w") => f.grid_w.to_string(),
            ("data", "visual_dim") => f.visual_dim.to_string(),
            ("data", "audio_dim") => f.audio_dim.to_string(),
            ("data", "text_dim") => f.text_dim.to_string(),
            ("data", "num_types") => f.num_types.to_string(),
            ("data", "region_rows") => f.region_rows.to_string(),
            ("data", "region_cols") => f.region_cols.to_string(),
            ("data", "audio_rate_hz") => f.audio_rate_hz.to_string(),
            ("data", "video_fps") => f.video_fps.to_string(),
            ("data", "tone_base_hz") => f.tone_base_hz.to_string(),
            ("data", "tone_step_hz") => f.tone_step_hz.to_string(),
            ("data", "encoder_seed") => f.encoder_seed.to_string(),
            ("model", k) if SECTIONS[2].1.contains(&k) => self.model.get(k)?,
            ("train", "learning_rate") => t.learning_rate.to_string(),
            ("train", "lr_decay_factor") => t.lr_decay_factor.to_string(),
            ("train", "lr_patience") => t.lr_patience.to_string(),
            ("train", "batch_size") => t.batch_size.to_string(),
            ("train", "epochs") => t.epochs.to_string(),
            ("train", "weight_decay") => t.weight_decay.to_string(),
            ("train", "grad_clip") => t.grad_clip.to_string(),
            ("train", "timesteps") => t.timesteps.to_string(),
            ("train", "beta_min") => t.beta_min.to_string(),
            ("train", "beta_max") => t.beta_max.to_string(),
            ("train", "target_range") => t.target_range.to_string(),
            ("sample", "steps") => self.steps.to_string(),
            ("sample", "split") => self.sample_split.as_str().to_string(),
            ("ablate", "seeds") => join(&self.ablate.seeds),
            ("ablate", "train_samples") => self.ablate.train_samples.to_string(),
            ("ablate", "epochs") => self.ablate.epochs.to_string(),
            ("ablate", "steps") => join(&self.ablate.steps),
            ("paths", "output") => self.paths.output.display().to_string(),
            ("paths", "dataset") => self.paths.dataset.display().to_string(),
            ("paths", "checkpoint") => self.paths.checkpoint.display().to_string(),
            ("paths", "predictions") => self.paths.predictions.display().to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let f = &mut d.features;
        let t = &mut self.train;
        match (section, key) {
            ("run", "seed") => self.seed = parse(key, v)?,
            ("data", "train_samples") => self.train_samples = parse(key, v)?,
            ("data", "val_samples") => self.val_samples = parse(key, v)?,
            ("data", "test_samples") => self.test_samples = parse(key, v)?,
            ("data", "map_h") => d.map_h = parse(key, v)?,
            ("data", "map_w") => d.map_w = parse(key, v)?,
            ("data", "min_objects") => d.min_objects = parse(key, v)?,
            ("data", "max_objects") => d.max_objects = parse(key, v)?,
            ("data", "sigma") => d.sigma = parse(key, v)?,
            ("data", "fixations") => d.fixations = parse(key, v)?,
            ("data", "intensity_jitter") => d.intensity_jitter = parse(key, v)?,
            ("data", "audio_noise") => d.audio_noise = parse(key, v)?,
            ("data", "frames") => f.frames = parse(key, v)?,
            ("data", "grid_h") => f.grid_h = parse(key, v)?,
            ("data", "grid_w") => f.grid_w = parse(key, v)?,
            ("data", "visual_dim") => f.visual_dim = parse(key, v)?,
            ("data", "audio_dim") => f.audio_dim = parse(key, v)?,
            ("data", "text_dim") => f.text_dim = parse(key, v)?,
            ("data", "num_types") => f.num_types = parse(key, v)?,
            ("data", "region_rows") => f.region_rows = parse(key, v)?,
            ("data", "region_cols") => f.region_cols = parse(key, v)?,
            ("data", "audio_rate_hz") => f.audio_rate_hz = parse(key, v)?,
            ("data", "video_fps") => f.video_fps = parse(key, v)?,
            ("data", "tone_base_hz") => f.tone_base_hz = parse(key, v)?,
            ("data", "tone_step_hz") => f.tone_step_hz = parse(key, v)?,
            ("data", "encoder_seed") => f.encoder_seed = parse(key, v)?,
            ("model", k) if SECTIONS[2].1.contains(&k) => self.model.set(k, v)?,
            ("train", "learning_rate") => t.learning_rate = parse(key, v)?,
            ("train", "lr_decay_factor") => t.lr_decay_factor = parse(key, v)?,
            ("train", "lr_patience") => t.lr_patience = parse(key, v)?,
            ("train", "batch_size") => t.batch_size = parse(key, v)?,
            ("train", "epochs") => t.epochs = parse(key, v)?,
            ("train", "weight_decay") => t.weight_decay = parse(key, v)?,
            ("train", "grad_clip") => t.grad_clip = parse(key, v)?,
            ("train", "timesteps") => t.timesteps = parse(key, v)?,
            ("train", "beta_min") => t.beta_min = parse(key, v)?,
            ("train", "beta_max") => t.beta_max = parse(key, v)?,
            ("train", "target_range") => t.target_range = v.parse()?,
            ("sample", "steps") => self.steps = parse(key, v)?,
            ("sample", "split") => self.sample_split = v.parse()?,
            ("ablate", "seeds") => self.ablate.seeds = parse_list(key, v)?,
            ("ablate", "train_samples") => self.ablate.train_samples = parse(key, v)?,
            ("ablate", "epochs") => self.ablate.epochs = parse(key, v)?,
            ("ablate", "steps") => self.ablate.steps = parse_list(key, v)?,
            ("paths", "output") => self.paths.output = PathBuf::from(v),
            ("paths", "dataset") => self.paths.dataset = PathBuf::from(v),
            ("paths", "checkpoint") => self.paths.checkpoint = PathBuf::from(v),
            ("paths", "predictions") => self.paths.predictions = PathBuf::from(v),
            _ => {
                return Err(Error::Config(format!("unknown key {key:?} in [{section}]")));
            }
        }
        self.sync();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        for split in Split::ALL {
            if self.split_size(split) == 0 {
                return Err(Error::Config(format!("{}_samples must be positive", split.as_str())));
            }
        }
        if self.steps == 0 || self.steps > self.train.timesteps {
            return Err(Error::Config(format!(
                "sample steps must lie in [1, {}], got {}",
                self.train.timesteps, self.steps
            )));
        }
        let a = &self.ablate;
        if a.seeds.is_empty() || a.steps.is_empty() || a.train_samples == 0 || a.epochs == 0 {
            return Err(Error::Config("ablate needs seeds, steps, samples and epochs".into()));
        }
        if let Some(&s) = a.steps.iter().find(|&&s| s == 0 || s > self.train.timesteps) {
            return Err(Error::Config(format!("ablate step count {s} out of range")));
        }
        if a.train_samples > self.train_samples {
            return Err(Error::Config(format!(
                "ablate.train_samples {} exceeds data.train_samples {}",
                a.train_samples, self.train_samples
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut doc = toml::Table::new();
        for (section, keys) in SECTIONS.iter() {
            let table = keys
                .iter()
                .map(|k| {
                    let v = self.get(section, k).expect("known key");
                    (k.to_string(), toml_value(&v, LIST_KEYS.contains(k)))
                })
                .collect();
            doc.insert(section.to_string(), toml::Value::Table(table));
        }
        toml::to_string(&doc).expect("plain tables serialize")
    }

    /// Parses a config file; keys left out keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut cfg = RunConfig::default();
        for (section, body) in &doc {
            if !SECTIONS.iter().any(|(s, _)| s == section) {
                return Err(Error::Config(format!("unknown section [{section}]")));
            }
            let toml::Value::Table(body) = body else {
                return Err(Error::Config(format!("{section} must be a [section] table")));
            };
            for (k, v) in body {
                cfg.set(section, k, &value_text(k, v)?)
                    .map_err(|e| Error::Config(format!("[{section}] {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Fields that shape a trained model and differ, as
    /// `[section] key: ours != theirs`. Only `[data]`, `[model]` and
    /// `[train]` take part; seeds, sampling and paths may change freely.
    pub fn diff(&self, other: &RunConfig) -> Vec<String> {
        let mut out = Vec::new();
        let shaping = ["data", "model", "train"];
        for (section, keys) in SECTIONS.iter().filter(|(s, _)| shaping.contains(s)) {
            for k in keys.iter() {
                let (a, b) = (self.get(section, k).unwrap(), other.get(section, k).unwrap());
                if a != b {
                    out.push(format!("[{section}] {k}: {a} != {b}"));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ConditioningMode;
    use crate::sitr::FusionStrategy;

    #[test]
    fn default_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!((c.train_samples, c.val_samples, c.test_samples), (2000, 200, 200));
        assert_eq!(c.steps, 4);
    }

    #[test]
    fn edited_roundtrip() {
        let text = "\
# a partial file
[run]
seed = 9
[model]
fusion = \"repeat_add\"   # trailing comment
conditioning = \"undecoupled\"
[train]
learning_rate = 0.00037
[data]
text_dim = 24
[ablate]
seeds = [4, 5]
";
        let c = RunConfig::from_text(text).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.model.fusion, FusionStrategy::RepeatAdd);
        assert_eq!(c.model.conditioning, ConditioningMode::Undecoupled);
        assert_eq!(c.model.text_dim, 24);
        assert_eq!(c.train.learning_rate, 0.00037);
        assert_eq!(c.ablate.seeds, vec![4, 5]);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        let diff = c.diff(&RunConfig::default());
        assert!(diff.contains(&"[model] fusion: repeat_add != sitr".to_string()));
        assert_eq!(diff.len(), 4);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for bad in [
            "[model]\nwidth = 3\n",
            "[nope]\n",
            "seed = 1\n",
            "[run]\nseed\n",
            "[run]\nseed = -1\n",
            "[model]\nmap_h = 24\n",
            "[train]\nbatch_size = 0\n",
            "[sample]\nsplit = \"holdout\"\n",
            "[run]\nseed = \"one\"\n",
            "[ablate]\nseeds = [[1]]\n",
            "run = 3\n",
            "[ablate]\ntrain_samples = 5000\n",
        ] {
            assert!(matches!(RunConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn split_seeds_disjoint() {
        let mut c = RunConfig::default();
        let mut bases: Vec<u64> = Vec::new();
        for seed in 0..3 {
            c.set_seed(seed);
            bases.extend(Split::ALL.iter().map(|&s| c.split_seed(s)));
        }
        // sample ranges [base, base + 2^32) never overlap
        bases.sort();
        assert!(bases.windows(2).all(|w| w[1] - w[0] >= 1 << 32));
    }

    #[test]
    fn paths_resolve_against_output() {
        let mut c = RunConfig::default();
        c.paths.output = PathBuf::from("/tmp/run");
        assert_eq!(c.paths.split_dir(Split::Val), PathBuf::from("/tmp/run/dataset/val"));
        c.paths.checkpoint = PathBuf::from("/abs/m.ckpt");
        assert_eq!(c.paths.checkpoint_path(), PathBuf::from("/abs/m.ckpt"));
    }
}
