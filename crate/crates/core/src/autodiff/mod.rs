//! Minimal reverse-mode differentiation: tensors, a recording tape with the
//! primitives the detector needs (including gradient reversal), parameters,
//! Adam, and the checkpoint format.

mod adam;
mod checkpoint;
mod graph;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint, restore_into, save_checkpoint, write_checkpoint};
pub use graph::{Gradients, Graph, Var, BCE_EPS};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};

