//! Minimal dense tensors with a reverse-mode tape.
//!
//! Only the operations the perception stack needs are provided: "same"
//! convolutions, spatial/channel pooling, a handful of pointwise maps,
//! matrix products for the attention MLP, channel softmax for fusion, and the
//! detection loss primitives. Broadcasting is limited to `[C,H,W]` against
//! `[C,1,1]` or `[1,H,W]`, which are the two attention-gate shapes.
//!
//! Frozen parameters enter the tape as constants: gradients pass through the
//! ops that consume them, but no gradient buffer is ever produced for them.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Axis, Binary, Gradients, ReduceMode, Tape, Unary, Var};
pub use tensor::Tensor;
