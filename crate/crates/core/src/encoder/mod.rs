//! Graph-convolutional encoder `f`, projector `g` and their checkpoints.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use model::{
    normalize_adjacency, Bound, EncoderConfig, EncoderInput, EncoderState, InitRecord, Mode,
    NamedTensor, NormUpdates, RunningStats, BN_MOMENTUM,
};
