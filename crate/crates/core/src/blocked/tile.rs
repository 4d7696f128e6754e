//! Per-row pieces of a tile computation shared by the forward and both
//! backward passes. A tile row is one query against a contiguous run of
//! keys; the diagonal tile simply has a shorter run.

use std::ops::Range;

use crate::numerics::{log_sigmoid, sigmoid, softplus, Matrix, Real};

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Keys of block `keys` visible to query `j` (strictly earlier tokens).
#[inline]
pub(crate) fn visible_keys(keys: &Range<usize>, j: usize) -> Range<usize> {
    keys.start..keys.end.min(j).max(keys.start)
}

/// Reusable buffers for one tile row.
#[derive(Debug, Default)]
pub(crate) struct RowScratch<T> {
    /// scaled logits
    pub z: Vec<T>,
    /// `−softplus(z)`
    pub log_keep: Vec<T>,
    /// attention weights
    pub w: Vec<T>,
}

impl<T: Real> RowScratch<T> {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            z: Vec::with_capacity(n),
            log_keep: Vec::with_capacity(n),
            w: Vec::with_capacity(n),
        }
    }

    /// Fill `z` and `log_keep` for query row `q_row` against `keys`, and
    /// return the row sum of `log_keep` accumulated right to left.
    pub fn load(&mut self, q_row: &[T], k: &Matrix<T>, keys: Range<usize>, scale: T) -> T {
        self.z.clear();
        self.log_keep.clear();
        for i in keys {
            let z = dot(q_row, k.row(i)) * scale;
            self.z.push(z);
            self.log_keep.push(-softplus(z));
        }
        let mut total = T::ZERO;
        for &l in self.log_keep.iter().rev() {
            total += l;
        }
        total
    }

    /// `w[c] = exp(log σ(z[c]) + Σ_{c' > c} log_keep[c'] + carry)`, where
    /// `carry` is the log of the stick left over by keys right of this tile.
    pub fn weights(&mut self, carry: T) {
        let n = self.z.len();
        self.w.clear();
        self.w.resize(n, T::ZERO);
        let mut cum = T::ZERO;
        for c in (0..n).rev() {
            let keep = self.log_keep[c];
            self.w[c] = (log_sigmoid(self.z[c], keep) + cum + carry).exp();
            cum += keep;
        }
    }

    /// Turn weight gradients `g = w ⊙ ∂L/∂w` (stored in `g`) into logit
    /// gradients in place, left to right, starting from the running sum
    /// `carry` of `g` over keys left of this tile. Returns the updated
    /// running sum.
    pub fn logit_grads(&self, g: &mut [T], carry: T) -> T {
        let mut run = carry;
        for (c, gc) in g.iter_mut().enumerate() {
            run += *gc;
            *gc -= sigmoid(self.z[c]) * run;
        }
        run
    }
}
