//! Audio preprocessing, synthetic modality encoders and the blob-world
//! dataset.

mod audio;
mod blobworld;
mod encoders;
pub mod record;

pub use audio::{hann_window, samples_per_frame, segment_audio, AudioWaveform};
pub use blobworld::{
    gaussian_map, generate_blob_world, generate_indexed, generate_scene, render_scene,
    BlobWorldConfig, DatasetSample, Scene, SceneObject,
};
pub use encoders::{
    synth_encode_audio, synth_encode_text, synth_encode_video, AudioFeatures, FeatureConfig,
    FrameObject, FramesDescriptor, SyntheticEncoders, TextFeatures, VisualFeatures,
};
