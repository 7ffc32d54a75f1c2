//! Dense tensors, a reverse-mode tape, the MLP encoder and Adam.

mod adam;
pub mod gradcheck;
mod graph;
mod mlp;
mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, Var};
pub use mlp::{Activation, EncoderModel};
pub use tensor::Tensor;
