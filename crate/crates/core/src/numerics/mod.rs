//! Tensor substrate, reverse-mode differentiation and the finite-difference
//! verification harness.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_HEADER};
pub use gradcheck::{gradcheck, gradcheck_params, ParamCheckReport};
pub use graph::{AttnMask, Gradients, Graph, Var};
pub use params::{trunc_normal, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
