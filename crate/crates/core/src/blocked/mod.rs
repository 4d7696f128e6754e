//! Tiled stick-breaking kernels.
//!
//! The sequence is cut into blocks of `block` tokens. A query block owns the
//! lower-triangular tiles to its left. The forward pass walks them from the
//! diagonal towards the start of the sequence, so the log of the remaining
//! stick for each query row is a single running scalar. Backward passes
//! replay the walk in the opposite direction.

mod backward;
mod forward;
mod layout;
mod tile;
mod twophase;

pub use backward::{blocked_backward_fused, blocked_backward_fused_with_mass, BlockedGrads};
pub use forward::{
    blocked_forward, default_skip_eps, skip_stats, BlockedCache, BlockedForward, ForwardOptions,
    RowLogAccumulator, SkipSummary, TileStats,
};
pub use layout::{plan_blocks, BlockLayout, DEFAULT_BLOCK};
pub use twophase::{blocked_backward_twophase, MemReport, TwoPhaseGrads};

use crate::numerics::{Matrix, Rng};

/// Inputs whose logit is `logit` wherever `i ≡ j − 1 (mod dim)` and zero
/// elsewhere, so a large `logit` makes every query spend its whole stick on
/// the immediately preceding token. Values are standard normal.
pub fn saturating_inputs(
    seq_len: usize,
    dim: usize,
    logit: f64,
    seed: u64,
) -> (Matrix, Matrix, Matrix) {
    let c = (logit * (dim as f64).sqrt()).sqrt();
    let k = Matrix::from_fn(seq_len, dim, |i, col| if i % dim == col { c } else { 0.0 });
    let q = Matrix::from_fn(seq_len, dim, |j, col| {
        if (j + dim - 1) % dim == col {
            c
        } else {
            0.0
        }
    });
    let v = Rng::new(seed).normal_matrix(seq_len, dim, 1.0);
    (q, k, v)
}
