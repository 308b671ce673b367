//! Dense-segment engine: forward/backward with gradient injection at segment
//! boundaries, momentum SGD, softmax cross-entropy and checkpoints.

mod checkpoint;
mod loss;
mod segment;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::{argmax_rows, softmax_xent};
pub use segment::{Activation, DenseLayer, ForwardTrace, LayerGrads, ParamGrads, Segment};
