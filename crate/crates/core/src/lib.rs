//! Stick-breaking attention.
//!
//! Each query distributes a unit "stick" over earlier tokens, most recent
//! first: token `i` receives `sigmoid(z[i,j])` of whatever is left after the
//! tokens between `i` and `j` have taken their share. The crate contains
//!
//! * [`numerics`]: dense matrices, stable scalar kernels, seeded RNG and a
//!   finite-difference oracle,
//! * [`reference`]: O(L²) ground-truth attention (direct and log-space forms,
//!   analytic backward, remainder and recurrent forms, softmax baselines with
//!   NoPE/RoPE/ALiBi/sliding-window positions),
//! * [`blocked`]: tiled forward/backward kernels with right-to-left
//!   accumulation, fused and two-phase backward passes and block skipping,
//! * [`model`]: a small decoder-only transformer with manual backward,
//! * [`tasks`]: MQAR/MQRAR generators and character-level corpus handling,
//! * [`training`]: masked cross-entropy, Adam and learning-rate sweeps.
//! * [`verify`]: gradient, equivalence and timing suites used by the harness.

pub mod blocked;
pub mod error;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod reference;
pub mod tasks;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{Matrix, Real, Rng};
pub use parallel::Exec;
