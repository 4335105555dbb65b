//! Compact EEGNet-style classifier: configuration, parameters, the
//! differentiable forward pass and checkpoints.

mod checkpoint;
mod classifier;
mod config;
mod net;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MODEL_MAGIC, MODEL_VERSION};
pub use classifier::{Classifier, Model};
pub use config::{BnMode, ModelConfig};
pub use net::{
    bind_params, cross_entropy, forward, forward_tape, predict_logits, softmax, update_running_stats,
    Forward, Mode, EVAL_BATCH,
};
pub(crate) use classifier::argmax_f32;
pub use params::{init_params, ModelParams, ParamSlot};
