//! Tensors, the reverse-mode tape, and finite-difference checks.

pub mod fd;
pub mod tape;
pub mod tensor;

pub use fd::{finite_difference_jacobian, max_rel_err, rel_err};
pub use tape::{forward_taped, Gradients, Marker, Precision, Tape, Var};
pub use tensor::Tensor;
