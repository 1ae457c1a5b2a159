//! Dense 2-D tensors with tape-based reverse-mode differentiation.
//!
//! Only the operations the model needs are provided. A [`Tape`] is rebuilt
//! for every forward pass and supports a single backward sweep.

mod check;
mod matrix;
mod ops;
mod tape;

pub use check::{check_gradients, rel_err, GradCheck, REL_ERR_FLOOR};
pub use matrix::{dot, Matrix};
pub use ops::sigmoid;
pub use tape::{corrupt_backward, BackwardCtx, BackwardFn, FaultGuard, Tape, Var, FAULT_SCALE};
