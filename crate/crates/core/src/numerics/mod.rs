//! Dense matrices, numerically stable scalar kernels, seeded randomness and
//! the finite-difference gradient oracle.

mod gradcheck;
mod matrix;
mod rng;
mod scalar;

pub use gradcheck::{finite_diff_grad, max_rel_error};
pub use matrix::{matmul, matmul_nt, matmul_tn, matmul_with, Matrix};
pub use rng::{derive_seed, Rng};
pub use scalar::{
    log_sigmoid, sigmoid, sigmoid_checked, softplus, softplus_stable, Real, SOFTPLUS_THRESHOLD,
};
