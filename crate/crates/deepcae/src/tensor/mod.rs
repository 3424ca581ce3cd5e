//! Dense matrix type and reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_diff_gradient, finite_diff_jacobian, rel_err_matrix, rel_err_scalar};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, VarRef};
