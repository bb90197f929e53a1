//! Dense `f64` tensors, a reverse-mode tape, layers, Adam and the
//! finite-difference gradient oracle.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    checkpoint_from_json, checkpoint_to_json, load_checkpoint, save_checkpoint, Checkpoint, ADAM_KEY, CONFIG_KEY,
};
pub use gradcheck::{finite_difference_check, FdOptions, FdReport};
pub use params::{derive_seed, xavier_uniform, ParamId, ParamStore};
pub use tape::{sigmoid, softplus, BnMode, BnStats, CustomOp, Segments, Tape, Var};
pub use tensor::{matmul, softmax, Tensor};
