//! Ground-truth O(L²)-memory attention implementations.
//!
//! Index convention: logits and weights are stored key-major, entry `(i, j)`
//! is how much query `j` attends to key `i`. Stick-breaking is strictly
//! causal (`i < j`); softmax baselines include the diagonal (`i ≤ j`).

mod position;
mod softmax;
mod stick;

pub use position::{
    alibi_bias, alibi_slope, rope_rotate, rope_rotate_inverse, PositionKind, PositionScheme,
};
pub use softmax::{softmax_attention, softmax_backward, HeadIndex, SoftmaxCache};
pub use stick::{
    additive_rpe_bias, sb_backward, sb_backward_with_mass, sb_forward, sb_forward_remainder,
    sb_logits, sb_recurrent, sb_weights_direct, sb_weights_logspace, AttnGrads, AttnLogits,
    AttnWeights, SbCache,
};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub(crate) fn check_qkv(op: &'static str, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.shape() != k.shape() || q.rows() != v.rows() {
        return Err(Error::shape(
            op,
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if q.cols() == 0 {
        return Err(Error::shape(op, "head dimension must be at least 1"));
    }
    Ok(())
}
