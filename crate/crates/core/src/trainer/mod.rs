//! Training: EMA codebook updates, straight-through gradients for the
//! projections, Adam with a one-cycle schedule, and checkpoints.

mod backward;
mod checkpoint;
mod config;
mod ema;
mod fit;
mod kmeans;
mod losses;
mod optim;

pub use backward::{
    loss_and_gradients, map_gradients, parameter_vector, reduce_trace, set_parameter_vector,
    surrogate_loss, Gradients, LossTerms, ReduceTrace,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{LossReport, TrainingConfig};
pub use ema::{ema_codebook_fit, ema_update, EmaAccumulator};
pub use fit::{fit, Corpus, Trainer};
pub use kmeans::{kmeans_reference, nearest, quantization_mse};
pub use losses::{commitment_loss, ortho_loss, ortho_loss_gradient};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
