//! Deterministic dense linear algebra, stable reductions, and seeded RNG.

mod matrix;
mod rng;
mod stable;

pub use matrix::{dot, linear_solve, lu_det, norm2, Matrix};
pub use rng::Rng;
pub use stable::{log_sum_exp, softmax, softmax_subset};
