use serde::{Deserialize, Serialize};

use super::backward::{check_upstream, weight_grads, BlockedGrads};
use super::forward::BlockedCache;
use super::tile::{axpy, visible_keys, RowScratch};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::parallel::Exec;

/// Storage used by the per-tile accumulator snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemReport {
    /// Tiles with both a forward (`a`) and a backward (`b`) snapshot.
    pub stored_pairs: usize,
    /// Scalars held across both snapshot stores.
    pub stored_values: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone)]
pub struct TwoPhaseGrads<T: Real = f64> {
    pub grads: BlockedGrads<T>,
    pub mem: MemReport,
}

/// Two-phase tiled backward pass.
///
/// Phase one walks each query block left to right, producing `d_q` and
/// recording the running weight-gradient sum `b` before every tile. Phase
/// two walks each key block down the query blocks, reloading both stored
/// accumulators to rebuild the tile and accumulate `d_k` and `d_v`. No
/// buffer is shared between workers in either phase.
///
/// Requires a forward pass run with [`ForwardOptions::two_phase`].
///
/// [`ForwardOptions::two_phase`]: super::ForwardOptions::two_phase
pub fn blocked_backward_twophase<T: Real>(
    cache: &BlockedCache<T>,
    d_o: &Matrix<T>,
    d_mass: Option<&[T]>,
    exec: Exec,
) -> Result<TwoPhaseGrads<T>> {
    check_upstream("blocked_backward_twophase", cache, d_o, d_mass)?;
    let BlockedCache {
        q,
        k,
        v,
        layout,
        scale,
        acc,
    } = cache;
    let scale = *scale;
    let (n, d) = q.shape();
    let dv = v.cols();
    let first = &acc.first_key_block;
    if acc.snapshots.is_none() {
        return Err(Error::MissingAccumulator {
            query_block: 0,
            key_block: first.first().copied().unwrap_or(0),
        });
    }
    let mass_of = |j: usize| d_mass.map_or(T::ZERO, |m| m[j]);

    let phase_one = exec.map(layout.n_blocks, |qb| -> Result<(Vec<T>, Vec<Vec<T>>)> {
        let rows = layout.range(qb);
        let mut d_q = vec![T::ZERO; rows.len() * d];
        let mut b = vec![T::ZERO; rows.len()];
        let mut grad_snapshots = vec![Vec::new(); qb + 1];
        let mut scratch = RowScratch::with_capacity(layout.block);
        let mut g = Vec::with_capacity(layout.block);
        for kb in first[qb]..=qb {
            let carry = acc.snapshot(layout, qb, kb)?;
            grad_snapshots[kb] = b.clone();
            let keys = layout.range(kb);
            for (r, j) in rows.clone().enumerate() {
                let vis = visible_keys(&keys, j);
                if vis.is_empty() {
                    continue;
                }
                scratch.load(q.row(j), k, vis.clone(), scale);
                scratch.weights(carry[r]);
                weight_grads(&scratch, v, vis.clone(), d_o.row(j), mass_of(j), &mut g);
                b[r] = scratch.logit_grads(&mut g, b[r]);
                let dq_row = &mut d_q[r * d..(r + 1) * d];
                for (c, i) in vis.enumerate() {
                    axpy(g[c] * scale, k.row(i), dq_row);
                }
            }
        }
        Ok((d_q, grad_snapshots))
    });

    let mut d_q = Matrix::zeros(n, d);
    let mut grad_store: Vec<Vec<T>> = vec![Vec::new(); layout.n_tiles()];
    for (qb, res) in phase_one.into_iter().enumerate() {
        let (rows_dq, snaps) = res?;
        let start = layout.range(qb).start;
        d_q.data_mut()[start * d..start * d + rows_dq.len()].copy_from_slice(&rows_dq);
        for (kb, s) in snaps.into_iter().enumerate() {
            grad_store[layout.tile_index(qb, kb)] = s;
        }
    }

    let phase_two = exec.map(layout.n_blocks, |kb| -> Result<(Vec<T>, Vec<T>, usize)> {
        let keys = layout.range(kb);
        let mut d_k = vec![T::ZERO; keys.len() * d];
        let mut d_v = vec![T::ZERO; keys.len() * dv];
        let mut scratch = RowScratch::with_capacity(layout.block);
        let mut g = Vec::with_capacity(layout.block);
        let mut tiles = 0;
        for qb in kb..layout.n_blocks {
            if kb < first[qb] {
                continue;
            }
            let carry = acc.snapshot(layout, qb, kb)?;
            let grad_carry = &grad_store[layout.tile_index(qb, kb)];
            if grad_carry.is_empty() {
                return Err(Error::MissingAccumulator {
                    query_block: qb,
                    key_block: kb,
                });
            }
            let mut touched = false;
            for (r, j) in layout.range(qb).enumerate() {
                let vis = visible_keys(&keys, j);
                if vis.is_empty() {
                    continue;
                }
                let d_o_row = d_o.row(j);
                let dm = mass_of(j);
                if dm == T::ZERO && d_o_row.iter().all(|&x| x == T::ZERO) {
                    continue;
                }
                touched = true;
                scratch.load(q.row(j), k, vis.clone(), scale);
                scratch.weights(carry[r]);
                weight_grads(&scratch, v, vis.clone(), d_o_row, dm, &mut g);
                scratch.logit_grads(&mut g, grad_carry[r]);
                for (c, i) in vis.enumerate() {
                    let off = i - keys.start;
                    axpy(g[c] * scale, q.row(j), &mut d_k[off * d..(off + 1) * d]);
                    axpy(scratch.w[c], d_o_row, &mut d_v[off * dv..(off + 1) * dv]);
                }
            }
            tiles += usize::from(touched);
        }
        Ok((d_k, d_v, tiles))
    });

    let mut d_k = Matrix::zeros(n, d);
    let mut d_v = Matrix::zeros(n, dv);
    let mut tiles_written = 0;
    for (kb, res) in phase_two.into_iter().enumerate() {
        let (bk, bv, tiles) = res?;
        let start = layout.range(kb).start;
        d_k.data_mut()[start * d..start * d + bk.len()].copy_from_slice(&bk);
        d_v.data_mut()[start * dv..start * dv + bv.len()].copy_from_slice(&bv);
        tiles_written += tiles;
    }

    let snapshots = acc.snapshots.as_deref().unwrap_or_default();
    let stored_pairs = snapshots
        .iter()
        .zip(&grad_store)
        .filter(|(m, g)| !m.is_empty() && !g.is_empty())
        .count();
    let stored_values: usize = snapshots.iter().chain(&grad_store).map(Vec::len).sum();
    Ok(TwoPhaseGrads {
        grads: BlockedGrads {
            d_q,
            d_k,
            d_v,
            tiles_written,
        },
        mem: MemReport {
            stored_pairs,
            stored_values,
            bytes: stored_values * std::mem::size_of::<T>(),
        },
    })
}
