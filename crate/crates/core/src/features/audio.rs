//! Frame-aligned audio segmentation with Hann windowing.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioWaveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioWaveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("empty waveform".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }
}

/// Audio samples per video frame, `rate / fps` truncated toward zero.
///
/// Rates that are not a multiple of the frame rate lose the fractional
/// remainder of every frame.
pub fn samples_per_frame(audio_rate_hz: u32, video_fps: u32) -> Result<usize> {
    if video_fps == 0 {
        return Err(Error::Argument("video fps must be positive".into()));
    }
    if audio_rate_hz == 0 {
        return Err(Error::Argument("audio rate must be positive".into()));
    }
    let n = (audio_rate_hz / video_fps) as usize;
    if n == 0 {
        return Err(Error::Argument(format!(
            "audio rate {audio_rate_hz} below frame rate {video_fps}"
        )));
    }
    Ok(n)
}

/// Symmetric Hann window `0.5·(1 − cos(2πk/(n−1)))`; `[1]` when `n == 1`.
pub fn hann_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    // mirrored so both endpoints are exactly zero and the window is symmetric
    let mut w: Vec<f64> = (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / denom).cos()))
        .collect();
    for k in 0..n / 2 {
        w[n - 1 - k] = w[k];
    }
    w
}

/// Splits the waveform into `num_frames` windowed segments of
/// [`samples_per_frame`] samples each. A waveform shorter than
/// `num_frames · N` is zero-padded at the tail; extra samples are ignored.
pub fn segment_audio(
    audio: &AudioWaveform,
    video_fps: u32,
    num_frames: usize,
) -> Result<Vec<Tensor>> {
    if num_frames == 0 {
        return Err(Error::Argument("num_frames must be positive".into()));
    }
    let n = samples_per_frame(audio.sample_rate_hz, video_fps)?;
    let window = hann_window(n);
    let samples = audio.samples();
    let segments = (0..num_frames)
        .map(|f| {
            let data = window
                .iter()
                .enumerate()
                .map(|(k, w)| w * samples.get(f * n + k).copied().unwrap_or(0.0))
                .collect();
            Tensor::vector(data).expect("n > 0")
        })
        .collect();
    Ok(segments)
}
