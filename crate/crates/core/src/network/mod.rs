//! N-segment fusion network: a shared CNN per MFF segment, global average
//! pooling, concatenation, then fc6 → fc7 → fc8.

mod checkpoint;
pub mod layers;
mod model;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::*;
pub use tensor::Tensor;
