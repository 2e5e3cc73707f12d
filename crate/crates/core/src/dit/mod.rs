//! The conditional denoising transformer.

mod block;
pub mod checkpoint;
mod config;
mod layers;
mod model;

pub use block::{
    block_backward, block_forward, block_forward_cached, BlockCache, BlockInputGrads,
    BlockParams, CrossAttention, ModulationParams,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ConditioningMode, ModelConfig};
pub use layers::{patchify, sincos_2d, timestep_sinusoid, unpatchify};
pub use model::{
    backward, condition_tokens, embed_timestep, forward, forward_cached, modulation,
    mse_loss_and_grad, DenoiserState, ForwardCache, SampleInputs, MAX_TIMESTEP,
};
