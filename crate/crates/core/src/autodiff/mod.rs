//! Minimal reverse-mode differentiation over dense tensors, with exactly the operations
//! the forecasting model needs.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_store, save_store, Manifest, TensorEntry, TensorRole, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use params::{adam_step, AdamConfig, Buffer, BufferId, Param, ParamId, ParamStore};
pub use tape::{BatchStats, BnMode, Gradients, Tape, Var};
pub use tensor::Tensor;
