//! Dense row-major matrices, Adam, and central-difference gradient checks.
//!
//! Everything here is generic over [`Real`] so the same code runs in `f32`
//! for training and in `f64` for the verification suites.

mod adam;
mod gradcheck;
mod matrix;
mod rng;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled};
pub use matrix::{DType, Matrix, Real};
pub use rng::RngState;
