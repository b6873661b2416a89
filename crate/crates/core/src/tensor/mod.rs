//! Minimal dense tensor engine with reverse-mode differentiation.
//!
//! Values are contiguous row-major `f64` buffers of rank 0..=2 (scalars,
//! vectors, matrices). Gradients are computed by recording primitives on a
//! flat [`Tape`] in construction order (which is already a topological
//! order) and replaying it backwards once. Tapes are cheap and rebuilt on
//! every training step; parameters live outside the tape as plain
//! [`Tensor`] values and are re-registered as leaves each step.
//!
//! Broadcasting is deliberately restricted to scalar-with-tensor; any other
//! shape mismatch is an error naming the primitive and both shapes.

mod fd;
mod gemm;
mod pointwise;
mod tape;
mod value;

pub use fd::finite_difference_check;
pub use pointwise::PointwiseFn;
pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;

/// Floor applied inside guarded logarithms: `log(max(x, LOG_FLOOR))`.
pub const LOG_FLOOR: f64 = 1e-12;
