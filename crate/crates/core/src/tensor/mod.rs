//! Dense `f64` tensors with a dynamic reverse-mode tape.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod value;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{log_sum_exp, AttnSegment, Tape, Var, LAYER_NORM_EPS, MASKED_LOG_PROB};
pub use value::{Result, Tensor, TensorError};

#[cfg(test)]
mod tests;
