//! The toy generator: motion-aware encoder, dense-motion or neural-mix
//! alignment, confidence gating, expression-modulated decoder, loss and an
//! Adam training loop on synthetic scenes.

mod config;
mod model;
mod train;

pub use config::{PipelineConfig, Variant};
pub use model::{EncoderOutput, ForwardCache, Model, Params, Prepared};
pub use train::{
    batch_indices, batch_loss_and_grad, build_datasets, decode_checkpoint, encode_checkpoint,
    evaluate, loss, params_from_checkpoint, params_to_checkpoint, sample_loss_and_grad,
    scene_seeds, scene_spec_for, train, train_steps, PerceptualBackend, TrainState,
    TrainingSample,
};
