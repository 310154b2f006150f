//! Dense arrays and the reverse-mode tape that differentiates them.

mod array;
mod gradcheck;
mod tape;

pub use array::{Array, Scalar};
pub use gradcheck::{analytic_gradient, grad_check, grad_check_with, max_relative_error, numeric_gradient};
pub use tape::{MaxBackward, Tape, Var};

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;
