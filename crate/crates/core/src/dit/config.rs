use std::fmt;
use std::str::FromStr;

use crate::config::{toml_value, value_text};
use crate::error::{Error, Result};
use crate::sitr::{FusionStrategy, SitrDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Condition tokens enter every block through cross attention.
    Decoupled,
    /// Mean-pooled condition is added to the timestep embedding instead.
    Undecoupled,
}

impl ConditioningMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Decoupled => "decoupled",
            ConditioningMode::Undecoupled => "undecoupled",
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoupled" => Ok(ConditioningMode::Decoupled),
            "undecoupled" => Ok(ConditioningMode::Undecoupled),
            _ => Err(Error::Config(format!("unknown conditioning mode {s:?}"))),
        }
    }
}

/// Architecture of the denoiser and of its condition front end.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub map_h: usize,
    pub map_w: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub conditioning: ConditioningMode,
    pub fusion: FusionStrategy,
    pub sitr_heads: usize,
    pub sitr_head_dim: usize,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            map_h: 24,
            map_w: 40,
            patch: 4,
            d_model: 64,
            heads: 4,
            depth: 3,
            mlp_ratio: 4.0,
            conditioning: ConditioningMode::Decoupled,
            fusion: FusionStrategy::Sitr,
            sitr_heads: 4,
            sitr_head_dim: 16,
            text_dim: 32,
            visual_dim: 32,
            audio_dim: 32,
        }
    }
}

pub(crate) const MODEL_KEYS: [&str; 14] = [
    "map_h",
    "map_w",
    "patch",
    "d_model",
    "heads",
    "depth",
    "mlp_ratio",
    "conditioning",
    "fusion",
    "sitr_heads",
    "sitr_head_dim",
    "text_dim",
    "visual_dim",
    "audio_dim",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.map_h.is_multiple_of(self.patch) || !self.map_w.is_multiple_of(self.patch) {
            return bad(format!(
                "map {}x{} not divisible by patch {}",
                self.map_h, self.map_w, self.patch
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if self.mlp_hidden() == 0 {
            return bad("mlp hidden width rounds to zero".into());
        }
        if self.sitr_heads == 0 || self.sitr_head_dim == 0 {
            return bad("sitr_heads and sitr_head_dim must be >= 1".into());
        }
        if !self.d_model.is_multiple_of(self.sitr_heads) {
            return bad(format!(
                "d_model {} not divisible by sitr_heads {}",
                self.d_model, self.sitr_heads
            ));
        }
        if self.text_dim == 0 || self.visual_dim == 0 || self.audio_dim == 0 {
            return bad("feature dims must be >= 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.map_h / self.patch, self.map_w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }

    pub fn sitr_dims(&self) -> SitrDims {
        SitrDims {
            text_dim: self.text_dim,
            visual_dim: self.visual_dim,
            audio_dim: self.audio_dim,
            d_model: self.d_model,
            heads: self.sitr_heads,
            head_dim: self.sitr_head_dim,
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "map_h" => self.map_h.to_string(),
            "map_w" => self.map_w.to_string(),
            "patch" => self.patch.to_string(),
            "d_model" => self.d_model.to_string(),
            "heads" => self.heads.to_string(),
            "depth" => self.depth.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "conditioning" => self.conditioning.to_string(),
            "fusion" => self.fusion.to_string(),
            "sitr_heads" => self.sitr_heads.to_string(),
            "sitr_head_dim" => self.sitr_head_dim.to_string(),
            "text_dim" => self.text_dim.to_string(),
            "visual_dim" => self.visual_dim.to_string(),
            "audio_dim" => self.audio_dim.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "map_h" => self.map_h = num(key, value)?,
            "map_w" => self.map_w = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "conditioning" => self.conditioning = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "sitr_heads" => self.sitr_heads = num(key, value)?,
            "sitr_head_dim" => self.sitr_head_dim = num(key, value)?,
            "text_dim" => self.text_dim = num(key, value)?,
            "visual_dim" => self.visual_dim = num(key, value)?,
            "audio_dim" => self.audio_dim = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// A flat TOML table in a fixed key order.
    pub fn to_text(&self) -> String {
        let table: toml::Table = MODEL_KEYS
            .iter()
            .map(|k| (k.to_string(), toml_value(&self.get(k).expect("known key"), false)))
            .collect();
        toml::to_string(&table).expect("plain table serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut cfg = ModelConfig::default();
        for (k, v) in &table {
            cfg.set(k, &value_text(k, v)?)?;
        }
        if let Some(missing) = MODEL_KEYS.iter().find(|k| !table.contains_key(**k)) {
            return Err(Error::Config(format!("model config lacks {missing}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fields that differ, as `key: ours != theirs`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        MODEL_KEYS
            .iter()
            .filter_map(|k| {
                let (a, b) = (self.get(k).unwrap(), other.get(k).unwrap());
                (a != b).then(|| format!("{k}: {a} != {b}"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = ModelConfig::default();
        c.mlp_ratio = 2.5;
        c.conditioning = ConditioningMode::Undecoupled;
        c.fusion = FusionStrategy::RepeatAverage;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::default();
        c.patch = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.depth = 0;
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::default().tokens(), 60);
    }

    #[test]
    fn diff_lists_fields() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.depth = 5;
        assert_eq!(a.diff(&b), vec!["depth: 3 != 5".to_string()]);
        assert!(ModelConfig::from_text("depth = 3\n").is_err());
        assert!(ModelConfig::from_text("bogus = 1\n").is_err());
    }
}
