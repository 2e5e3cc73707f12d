//! Fixed random-projection encoders standing in for pretrained video,
//! audio and text backbones.
//!
//! Each encoder hand-codes a small structural description of its input and
//! multiplies it by a projection matrix drawn once from `encoder_seed`.

use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{matmul, SeededRng, Tensor};

/// Output dimensions and signal layout shared by all three encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// t_v, also the number of audio segments (t_a).
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    /// Distinct object identities.
    pub num_types: usize,
    /// Coarse location grid named by text tokens.
    pub region_rows: usize,
    pub region_cols: usize,
    pub audio_rate_hz: u32,
    pub video_fps: u32,
    /// Probe tone for identity `k` sits at `base + k·step` Hz.
    pub tone_base_hz: f64,
    pub tone_step_hz: f64,
    pub encoder_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            grid_h: 6,
            grid_w: 10,
            visual_dim: 32,
            audio_dim: 32,
            text_dim: 32,
            num_types: 8,
            region_rows: 3,
            region_cols: 5,
            audio_rate_hz: 8000,
            video_fps: 25,
            tone_base_hz: 300.0,
            tone_step_hz: 400.0,
            encoder_seed: 7,
        }
    }
}

impl FeatureConfig {
    pub fn vocab_size(&self) -> usize {
        self.num_types + self.region_rows * self.region_cols
    }

    pub fn identity_token(&self, identity: usize) -> usize {
        identity
    }

    pub fn region_token(&self, region_row: usize, region_col: usize) -> usize {
        self.num_types + region_row * self.region_cols + region_col
    }

    /// Region (row, col) of a visual grid cell.
    pub fn region_of(&self, row: usize, col: usize) -> (usize, usize) {
        (
            row * self.region_rows / self.grid_h,
            col * self.region_cols / self.grid_w,
        )
    }

    pub fn tone_hz(&self, identity: usize) -> f64 {
        self.tone_base_hz + self.tone_step_hz * identity as f64
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("frames", self.frames),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("visual_dim", self.visual_dim),
            ("audio_dim", self.audio_dim),
            ("text_dim", self.text_dim),
            ("num_types", self.num_types),
            ("region_rows", self.region_rows),
            ("region_cols", self.region_cols),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.region_rows > self.grid_h || self.region_cols > self.grid_w {
            return Err(Error::Config("region grid finer than visual grid".into()));
        }
        let nyquist = self.audio_rate_hz as f64 / 2.0;
        if self.tone_hz(self.num_types - 1) >= nyquist || self.tone_base_hz <= 0.0 {
            return Err(Error::Config(format!(
                "identity tones must lie in (0, {nyquist}) Hz"
            )));
        }
        crate::features::samples_per_frame(self.audio_rate_hz, self.video_fps)?;
        Ok(())
    }

    fn visual_structure_dim(&self) -> usize {
        self.num_types + 1 + POS_FEATURES
    }
}

const POS_FEATURES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    /// `[t_v, h_v, w_v, c_v]`
    pub grid: Tensor,
}

impl VisualFeatures {
    pub fn new(grid: Tensor) -> Result<Self> {
        if grid.rank() != 4 {
            return shape_err(format!("visual features need rank 4, got {:?}", grid.shape()));
        }
        Ok(Self { grid })
    }

    /// Mean over time, `[h_v, w_v, c_v]`.
    pub fn pooled(&self) -> Tensor {
        self.grid.mean_axis0().expect("rank 4")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    /// `[t_a, c_a]`
    pub tokens: Tensor,
}

impl AudioFeatures {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return shape_err(format!("audio features need rank 2, got {:?}", tokens.shape()));
        }
        Ok(Self { tokens })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    /// `[n, c_t]`
    pub tokens: Tensor,
}

impl TextFeatures {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return shape_err(format!("text features need rank 2, got {:?}", tokens.shape()));
        }
        Ok(Self { tokens })
    }
}

/// One object visible in a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameObject {
    pub identity: usize,
    pub row: usize,
    pub col: usize,
    pub intensity: f64,
}

/// Symbolic description of a clip: the objects visible in each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramesDescriptor {
    pub frames: Vec<Vec<FrameObject>>,
}

/// The three projection tables, drawn once per `encoder_seed`.
#[derive(Debug, Clone)]
pub struct SyntheticEncoders {
    cfg: FeatureConfig,
    visual_proj: Tensor,
    audio_proj: Tensor,
    text_table: Tensor,
}

impl SyntheticEncoders {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.encoder_seed;
        let vin = cfg.visual_structure_dim();
        let visual_proj = SeededRng::new(s ^ 0x5649_5355)
            .normal_tensor(&[vin, cfg.visual_dim], 1.0 / (vin as f64).sqrt());
        let audio_proj = SeededRng::new(s ^ 0x4155_4449)
            .normal_tensor(&[cfg.num_types, cfg.audio_dim], 1.0 / (cfg.num_types as f64).sqrt());
        let text_table =
            SeededRng::new(s ^ 0x5445_5854).normal_tensor(&[cfg.vocab_size(), cfg.text_dim], 1.0);
        Ok(Self {
            cfg: cfg.clone(),
            visual_proj,
            audio_proj,
            text_table,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    fn cell_structure(&self, row: usize, col: usize, out: &mut [f64]) {
        let c = &self.cfg;
        let y = (row as f64 + 0.5) / c.grid_h as f64;
        let x = (col as f64 + 0.5) / c.grid_w as f64;
        let base = c.num_types + 1;
        out[base] = (PI * y).sin();
        out[base + 1] = (PI * y).cos();
        out[base + 2] = (2.0 * PI * y).sin();
        out[base + 3] = (2.0 * PI * y).cos();
        out[base + 4] = (PI * x).sin();
        out[base + 5] = (PI * x).cos();
        out[base + 6] = (2.0 * PI * x).sin();
        out[base + 7] = (2.0 * PI * x).cos();
    }

    /// `[t_v, h_v, w_v, c_v]` features: per cell, identity one-hot and
    /// occupancy scaled by intensity, plus a positional code, projected.
    pub fn encode_video(&self, desc: &FramesDescriptor) -> Result<VisualFeatures> {
        let c = &self.cfg;
        if desc.frames.len() != c.frames {
            return shape_err(format!(
                "descriptor has {} frames, encoder expects {}",
                desc.frames.len(),
                c.frames
            ));
        }
        let cells = c.grid_h * c.grid_w;
        let sdim = c.visual_structure_dim();
        let mut structure = Tensor::zeros(&[c.frames * cells, sdim]);
        for (f, objects) in desc.frames.iter().enumerate() {
            for r in 0..c.grid_h {
                for col in 0..c.grid_w {
                    let row = structure.row_mut(f * cells + r * c.grid_w + col);
                    self.cell_structure(r, col, row);
                }
            }
            for o in objects {
                if o.row >= c.grid_h || o.col >= c.grid_w || o.identity >= c.num_types {
                    return Err(Error::Argument(format!("object out of range: {o:?}")));
                }
                let row = structure.row_mut(f * cells + o.row * c.grid_w + o.col);
                row[o.identity] += o.intensity;
                row[c.num_types] += o.intensity;
            }
        }
        let feats = matmul(&structure, &self.visual_proj)?.to_f32_precision();
        VisualFeatures::new(feats.reshape(&[c.frames, c.grid_h, c.grid_w, c.visual_dim])?)
    }

    /// `[t_a, c_a]` features: per segment, the normalised spectral magnitude
    /// at each identity's probe tone, projected.
    pub fn encode_audio(&self, segments: &[Tensor]) -> Result<AudioFeatures> {
        let c = &self.cfg;
        if segments.is_empty() {
            return Err(Error::Argument("no audio segments".into()));
        }
        let mut structure = Tensor::zeros(&[segments.len(), c.num_types]);
        for (i, seg) in segments.iter().enumerate() {
            let n = seg.len();
            let row = structure.row_mut(i);
            for (k, out) in row.iter_mut().enumerate() {
                let w = 2.0 * PI * c.tone_hz(k) / c.audio_rate_hz as f64;
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &v) in seg.data().iter().enumerate() {
                    re += v * (w * j as f64).cos();
                    im -= v * (w * j as f64).sin();
                }
                // a unit sine under a Hann window peaks at n/4
                *out = (re * re + im * im).sqrt() / (n as f64 / 4.0);
            }
        }
        let feats = matmul(&structure, &self.audio_proj)?.to_f32_precision();
        AudioFeatures::new(feats)
    }

    /// One fixed embedding row per token id.
    pub fn encode_text(&self, token_ids: &[usize]) -> Result<TextFeatures> {
        let c = &self.cfg;
        if token_ids.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        let vocab = c.vocab_size();
        let mut out = Tensor::zeros(&[token_ids.len(), c.text_dim]);
        for (i, &id) in token_ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Vocabulary { id, vocab });
            }
            out.row_mut(i).copy_from_slice(self.text_table.row(id));
        }
        TextFeatures::new(out.to_f32_precision())
    }
}

pub fn synth_encode_video(desc: &FramesDescriptor, cfg: &FeatureConfig) -> Result<VisualFeatures> {
    SyntheticEncoders::new(cfg)?.encode_video(desc)
}

pub fn synth_encode_audio(segments: &[Tensor], cfg: &FeatureConfig) -> Result<AudioFeatures> {
    SyntheticEncoders::new(cfg)?.encode_audio(segments)
}

pub fn synth_encode_text(token_ids: &[usize], cfg: &FeatureConfig) -> Result<TextFeatures> {
    SyntheticEncoders::new(cfg)?.encode_text(token_ids)
}
