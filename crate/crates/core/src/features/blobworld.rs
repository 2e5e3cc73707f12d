//! Blob-world: a synthetic multimodal saliency dataset.
//!
//! A scene holds K objects of distinct identities on the visual grid. One is
//! salient. The text names its identity and coarse region, the audio carries
//! its identity tone, and the ground truth is a Gaussian blob on its centre.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::features::{
    segment_audio, AudioFeatures, AudioWaveform, FeatureConfig, FrameObject, FramesDescriptor,
    SyntheticEncoders, TextFeatures, VisualFeatures,
};
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BlobWorldConfig {
    pub map_h: usize,
    pub map_w: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Blob standard deviation in map pixels.
    pub sigma: f64,
    pub fixations: usize,
    /// Per-frame intensity jitter, uniform in `1 ± jitter`.
    pub intensity_jitter: f64,
    pub audio_noise: f64,
    pub features: FeatureConfig,
}

impl Default for BlobWorldConfig {
    fn default() -> Self {
        Self {
            map_h: 24,
            map_w: 40,
            min_objects: 2,
            max_objects: 5,
            sigma: 2.5,
            fixations: 10,
            intensity_jitter: 0.2,
            audio_noise: 0.05,
            features: FeatureConfig::default(),
        }
    }
}

impl BlobWorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        let f = &self.features;
        if self.map_h == 0 || self.map_w == 0 {
            return Err(Error::Config("map size must be positive".into()));
        }
        if !self.map_h.is_multiple_of(f.grid_h) || !self.map_w.is_multiple_of(f.grid_w) {
            return Err(Error::Config(format!(
                "map {}x{} not divisible by visual grid {}x{}",
                self.map_h, self.map_w, f.grid_h, f.grid_w
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        let capacity = (f.grid_h * f.grid_w).min(f.num_types);
        if self.max_objects > capacity {
            return Err(Error::Argument(format!(
                "{} objects exceed grid capacity {capacity}",
                self.max_objects
            )));
        }
        if self.fixations == 0 {
            return Err(Error::Config("need at least one fixation".into()));
        }
        if !(self.sigma >= 0.0) || !(0.0..1.0).contains(&self.intensity_jitter) {
            return Err(Error::Config("sigma >= 0 and jitter in [0,1) required".into()));
        }
        Ok(())
    }

    /// Pixel centre of visual cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (usize, usize) {
        let ch = self.map_h / self.features.grid_h;
        let cw = self.map_w / self.features.grid_w;
        (row * ch + ch / 2, col * cw + cw / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub identity: usize,
    pub row: usize,
    pub col: usize,
}

/// Symbolic content of one sample before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub salient: usize,
    pub tokens: Vec<usize>,
    pub video: FramesDescriptor,
    pub audio: AudioWaveform,
    pub gt_map: Tensor,
    pub fixations: Vec<(usize, usize)>,
}

impl Scene {
    pub fn salient_object(&self) -> SceneObject {
        self.objects[self.salient]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub visual: VisualFeatures,
    pub audio: AudioFeatures,
    pub text: TextFeatures,
    /// `[H, W]`, values in `[0, 1]`, peak 1.
    pub gt_map: Tensor,
    pub fixations: Vec<(usize, usize)>,
}

impl DatasetSample {
    pub fn map_size(&self) -> (usize, usize) {
        (self.gt_map.shape()[0], self.gt_map.shape()[1])
    }
}

/// Peak-normalised isotropic Gaussian; `sigma == 0` gives a single pixel.
pub fn gaussian_map(h: usize, w: usize, center: (usize, usize), sigma: f64) -> Tensor {
    let mut m = Tensor::zeros(&[h, w]);
    let (cy, cx) = center;
    for r in 0..h {
        for c in 0..w {
            let v = if sigma > 0.0 {
                let d2 = (r as f64 - cy as f64).powi(2) + (c as f64 - cx as f64).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            } else if (r, c) == center {
                1.0
            } else {
                0.0
            };
            m.data_mut()[r * w + c] = v;
        }
    }
    m
}

pub fn generate_scene(rng: &mut SeededRng, cfg: &BlobWorldConfig) -> Result<Scene> {
    cfg.validate()?;
    let f = &cfg.features;
    let k = rng.int_inclusive(cfg.min_objects, cfg.max_objects);
    let cells = rng.choose_distinct(f.grid_h * f.grid_w, k);
    let identities = rng.choose_distinct(f.num_types, k);
    let objects: Vec<SceneObject> = cells
        .iter()
        .zip(&identities)
        .map(|(&cell, &identity)| SceneObject {
            identity,
            row: cell / f.grid_w,
            col: cell % f.grid_w,
        })
        .collect();
    let salient = rng.below(k);
    let target = objects[salient];

    let frames = (0..f.frames)
        .map(|_| {
            objects
                .iter()
                .map(|o| FrameObject {
                    identity: o.identity,
                    row: o.row,
                    col: o.col,
                    intensity: 1.0 + cfg.intensity_jitter * (2.0 * rng.uniform() - 1.0),
                })
                .collect()
        })
        .collect();

    let per_frame = crate::features::samples_per_frame(f.audio_rate_hz, f.video_fps)?;
    let omega = 2.0 * PI * f.tone_hz(target.identity) / f.audio_rate_hz as f64;
    let phase = 2.0 * PI * rng.uniform();
    let samples = (0..per_frame * f.frames)
        .map(|j| {
            let v = 0.6 * (omega * j as f64 + phase).sin() + cfg.audio_noise * rng.normal();
            v.clamp(-1.0, 1.0)
        })
        .collect();
    let audio = AudioWaveform::new(samples, f.audio_rate_hz)?;

    let (rr, rc) = f.region_of(target.row, target.col);
    let tokens = vec![f.identity_token(target.identity), f.region_token(rr, rc)];

    let center = cfg.cell_center(target.row, target.col);
    let gt_map = gaussian_map(cfg.map_h, cfg.map_w, center, cfg.sigma).to_f32_precision();
    let fixations = (0..cfg.fixations)
        .map(|_| {
            let r = center.0 as f64 + cfg.sigma * rng.normal();
            let c = center.1 as f64 + cfg.sigma * rng.normal();
            (
                r.round().clamp(0.0, (cfg.map_h - 1) as f64) as usize,
                c.round().clamp(0.0, (cfg.map_w - 1) as f64) as usize,
            )
        })
        .collect();

    Ok(Scene {
        objects,
        salient,
        tokens,
        video: FramesDescriptor { frames },
        audio,
        gt_map,
        fixations,
    })
}

pub fn render_scene(scene: &Scene, enc: &SyntheticEncoders) -> Result<DatasetSample> {
    let f = enc.config();
    let segments = segment_audio(&scene.audio, f.video_fps, f.frames)?;
    Ok(DatasetSample {
        visual: enc.encode_video(&scene.video)?,
        audio: enc.encode_audio(&segments)?,
        text: enc.encode_text(&scene.tokens)?,
        gt_map: scene.gt_map.clone(),
        fixations: scene.fixations.clone(),
    })
}

pub fn generate_blob_world(
    rng: &mut SeededRng,
    enc: &SyntheticEncoders,
    cfg: &BlobWorldConfig,
) -> Result<DatasetSample> {
    render_scene(&generate_scene(rng, cfg)?, enc)
}

/// Sample `index` of a split seeded with `base_seed`.
pub fn generate_indexed(
    base_seed: u64,
    index: usize,
    enc: &SyntheticEncoders,
    cfg: &BlobWorldConfig,
) -> Result<DatasetSample> {
    let mut rng = SeededRng::for_index(base_seed, index as u64);
    generate_blob_world(&mut rng, enc, cfg)
}
