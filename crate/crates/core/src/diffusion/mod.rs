//! Noise schedule, training loop and DDIM inference.

mod optim;
mod sample;
mod schedule;
mod train;

pub use optim::{clip_grad_norm, AdamW, ReduceOnPlateau};
pub use sample::{sample, sample_raw, sample_split, InferenceConfig};
pub use schedule::{
    ddim_step, forward_noise, make_schedule, sample_times, NoiseSchedule, TargetRange,
};
pub use train::{
    fit, mse_loss, sample_inputs, train_step, validation_loss, EpochLog, TrainConfig, TrainReport,
};
