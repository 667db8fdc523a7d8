//! Loss, optimizer, metrics, checkpoints and the training loop.

mod adam;
mod checkpoint;
mod loss;
mod metrics;
mod trainer;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::{cross_entropy_loss, LOG_FLOOR};
pub use metrics::{argmax, ClassMetrics, ConfusionMatrix, Metrics};
pub use trainer::{confusion, evaluate, examples_for, train, EpochRecord, EpochStats, Example, TrainConfig, TrainOutcome, Trainer};
