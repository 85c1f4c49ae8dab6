//! Dense reverse-mode differentiation for the masked autoencoder.
//!
//! Values in a [`Graph`] are row-major matrices. Parameters live outside the
//! graph in [`ParamGroup`]s and are copied in as leaves for each forward
//! pass; [`Graph::backward`] followed by [`Graph::accumulate_param_grads`]
//! fills the tensors' gradient slots, which [`adam_step`] consumes.

mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Graph, Var};
pub use optim::{adam_step, AdamState};
pub use tensor::{param_count, ParamCount, ParamGroup, Tensor};
