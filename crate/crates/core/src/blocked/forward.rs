use serde::{Deserialize, Serialize};

use super::layout::BlockLayout;
use super::tile::{axpy, visible_keys, RowScratch};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::parallel::Exec;

/// Default skip threshold on the remaining stick mass for element type `T`.
pub fn default_skip_eps<T: Real>() -> f64 {
    if std::mem::size_of::<T>() <= 4 {
        1e-6
    } else {
        1e-12
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    /// Stop walking left once every row of a query block has less than
    /// `skip_eps` of its stick left.
    pub skip: bool,
    /// `None` picks [`default_skip_eps`] for the element type.
    pub skip_eps: Option<f64>,
    /// Record the per-tile accumulator snapshots needed by the two-phase
    /// backward pass.
    pub store_snapshots: bool,
    pub exec: Exec,
}

impl ForwardOptions {
    pub fn with_skip(mut self, skip: bool) -> Self {
        self.skip = skip;
        self
    }

    pub fn with_skip_eps(mut self, eps: f64) -> Self {
        self.skip_eps = Some(eps);
        self
    }

    pub fn two_phase(mut self) -> Self {
        self.store_snapshots = true;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }
}

/// Per-row log of the remaining stick mass after the forward pass, plus
/// what the backward passes need to replay it.
#[derive(Debug, Clone)]
pub struct RowLogAccumulator<T: Real = f64> {
    /// `a[j] = −Σ softplus(z_ij)` over every visited key of query `j`.
    pub a: Vec<T>,
    /// Leftmost key block the forward pass visited, per query block.
    pub first_key_block: Vec<usize>,
    /// Value of `a` for the rows of tile `(qb, kb)` just before the tile was
    /// processed, indexed by [`BlockLayout::tile_index`]. Empty for skipped
    /// tiles.
    pub snapshots: Option<Vec<Vec<T>>>,
}

impl<T: Real> RowLogAccumulator<T> {
    /// `exp(a)`: the unallocated part of each query's stick.
    pub fn remaining_mass(&self) -> Vec<T> {
        self.a.iter().map(|&a| a.exp()).collect()
    }

    pub fn snapshot(&self, layout: &BlockLayout, qb: usize, kb: usize) -> Result<&[T]> {
        let missing = Error::MissingAccumulator {
            query_block: qb,
            key_block: kb,
        };
        let snaps = self.snapshots.as_ref().ok_or(missing)?;
        let s = &snaps[layout.tile_index(qb, kb)];
        if s.is_empty() {
            return Err(Error::MissingAccumulator {
                query_block: qb,
                key_block: kb,
            });
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TileStats {
    pub total: usize,
    pub visited: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipSummary {
    pub visited: usize,
    pub skipped: usize,
    pub fraction: f64,
}

pub fn skip_stats(stats: &TileStats) -> SkipSummary {
    let total = stats.visited + stats.skipped;
    SkipSummary {
        visited: stats.visited,
        skipped: stats.skipped,
        fraction: if total == 0 {
            0.0
        } else {
            stats.skipped as f64 / total as f64
        },
    }
}

/// Inputs and accumulators retained for the backward passes. Attention
/// weights are not stored; they are recomputed tile by tile.
#[derive(Debug, Clone)]
pub struct BlockedCache<T: Real = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub layout: BlockLayout,
    pub scale: T,
    pub acc: RowLogAccumulator<T>,
}

#[derive(Debug, Clone)]
pub struct BlockedForward<T: Real = f64> {
    pub o: Matrix<T>,
    pub cache: BlockedCache<T>,
    pub stats: TileStats,
}

struct QueryBlockOut<T> {
    o: Vec<T>,
    a: Vec<T>,
    first_kb: usize,
    visited: usize,
    snapshots: Vec<Vec<T>>,
}

pub(crate) fn check_inputs<T: Real>(
    op: &'static str,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: &BlockLayout,
) -> Result<()> {
    if q.shape() != k.shape() || q.rows() != v.rows() || q.cols() == 0 {
        return Err(Error::shape(
            op,
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if layout.seq_len != q.rows() {
        return Err(Error::shape(
            op,
            format!(
                "layout covers {} tokens, inputs have {}",
                layout.seq_len,
                q.rows()
            ),
        ));
    }
    Ok(())
}

/// Tiled stick-breaking forward pass.
///
/// Each query block walks its key blocks from the diagonal leftwards,
/// carrying the running log of the unallocated stick `a` for every row.
pub fn blocked_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: &BlockLayout,
    opts: &ForwardOptions,
) -> Result<BlockedForward<T>> {
    check_inputs("blocked_forward", q, k, v, layout)?;
    let eps = opts.skip_eps.unwrap_or_else(default_skip_eps::<T>);
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain(
            "blocked_forward",
            format!("skip_eps must lie in (0, 1), got {eps}"),
        ));
    }
    let skip_below = opts.skip.then(|| T::from_f64(eps.ln()));
    let scale = T::from_f64(1.0 / (q.cols() as f64).sqrt());
    let dv = v.cols();

    let blocks = opts.exec.map(layout.n_blocks, |qb| {
        let rows = layout.range(qb);
        let n_rows = rows.len();
        let mut o = vec![T::ZERO; n_rows * dv];
        let mut a = vec![T::ZERO; n_rows];
        let mut snapshots = Vec::new();
        if opts.store_snapshots {
            snapshots.resize(qb + 1, Vec::new());
        }
        let mut scratch = RowScratch::with_capacity(layout.block);
        let mut first_kb = qb;
        let mut visited = 0;
        for kb in layout.forward_order(qb) {
            if let Some(limit) = skip_below {
                if kb < qb && a.iter().all(|&x| x < limit) {
                    break;
                }
            }
            if opts.store_snapshots {
                snapshots[kb] = a.clone();
            }
            let keys = layout.range(kb);
            for (r, j) in rows.clone().enumerate() {
                let vis = visible_keys(&keys, j);
                if vis.is_empty() {
                    continue;
                }
                let row_sum = scratch.load(q.row(j), k, vis.clone(), scale);
                scratch.weights(a[r]);
                let o_row = &mut o[r * dv..(r + 1) * dv];
                for (c, i) in vis.enumerate().rev() {
                    axpy(scratch.w[c], v.row(i), o_row);
                }
                a[r] += row_sum;
            }
            first_kb = kb;
            visited += 1;
        }
        QueryBlockOut {
            o,
            a,
            first_kb,
            visited,
            snapshots,
        }
    });

    let n = layout.seq_len;
    let mut o = Matrix::zeros(n, dv);
    let mut a = Vec::with_capacity(n);
    let mut first_key_block = Vec::with_capacity(layout.n_blocks);
    let mut snapshots = opts
        .store_snapshots
        .then(|| vec![Vec::new(); layout.n_tiles()]);
    let mut stats = TileStats {
        total: layout.n_tiles(),
        ..TileStats::default()
    };
    for (qb, block) in blocks.into_iter().enumerate() {
        let start = layout.range(qb).start;
        o.data_mut()[start * dv..start * dv + block.o.len()].copy_from_slice(&block.o);
        a.extend_from_slice(&block.a);
        first_key_block.push(block.first_kb);
        stats.visited += block.visited;
        if let Some(all) = snapshots.as_mut() {
            for (kb, s) in block.snapshots.into_iter().enumerate() {
                all[layout.tile_index(qb, kb)] = s;
            }
        }
    }
    stats.skipped = stats.total - stats.visited;

    Ok(BlockedForward {
        o,
        cache: BlockedCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            layout: *layout,
            scale,
            acc: RowLogAccumulator {
                a,
                first_key_block,
                snapshots,
            },
        },
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocked::plan_blocks;
    use crate::numerics::Rng;
    use crate::reference::sb_forward;

    fn random_qkv(n: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
        let mut rng = Rng::new(seed);
        (
            rng.normal_matrix(n, d, 1.0),
            rng.normal_matrix(n, d, 1.0),
            rng.normal_matrix(n, d, 1.0),
        )
    }

    #[test]
    fn matches_reference_for_several_blocks() {
        let (q, k, v) = random_qkv(256, 32, 1);
        let (o_ref, _) = sb_forward(&q, &k, &v).unwrap();
        for block in [8, 16, 64] {
            let layout = plan_blocks(256, block).unwrap();
            let out = blocked_forward(&q, &k, &v, &layout, &ForwardOptions::default()).unwrap();
            assert!(out.o.max_abs_diff(&o_ref) < 1e-10, "block {block}");
            assert_eq!(skip_stats(&out.stats).skipped, 0);
        }
    }

    #[test]
    fn single_tile_is_exact_reference() {
        let (q, k, v) = random_qkv(40, 8, 2);
        let (o_ref, cache) = sb_forward(&q, &k, &v).unwrap();
        let layout = plan_blocks(40, 64).unwrap();
        let out = blocked_forward(&q, &k, &v, &layout, &ForwardOptions::default()).unwrap();
        assert!(out.o.max_abs_diff(&o_ref) < 1e-12);
        for (x, c) in out.cache.acc.a.iter().zip(&cache.consumed) {
            assert!((x + c).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulator_is_remaining_mass() {
        let (q, k, v) = random_qkv(100, 16, 3);
        let (_, cache) = sb_forward(&q, &k, &v).unwrap();
        let sums = cache.weights.query_sums();
        let layout = plan_blocks(100, 16).unwrap();
        let out = blocked_forward(&q, &k, &v, &layout, &ForwardOptions::default()).unwrap();
        for (j, m) in out.cache.acc.remaining_mass().into_iter().enumerate() {
            assert!((m - (1.0 - sums[j])).abs() < 1e-9);
            assert!(out.cache.acc.a[j] <= 0.0);
        }
    }

    #[test]
    fn never_consumed_stick_skips_nothing() {
        let n = 128;
        let d = 4;
        // z = −100 everywhere: q_j·k_i/√d with q = 10·1, k = −5·1
        let q = Matrix::filled(n, d, 10.0);
        let k = Matrix::filled(n, d, -5.0);
        let v = Matrix::filled(n, d, 1.0);
        let layout = plan_blocks(n, 16).unwrap();
        let out = blocked_forward(
            &q,
            &k,
            &v,
            &layout,
            &ForwardOptions::default().with_skip(true),
        )
        .unwrap();
        assert_eq!(out.stats.skipped, 0);
        assert_eq!(out.stats.visited, layout.n_tiles());
    }

    #[test]
    fn snapshots_only_when_requested() {
        let (q, k, v) = random_qkv(50, 4, 4);
        let layout = plan_blocks(50, 16).unwrap();
        let plain = blocked_forward(&q, &k, &v, &layout, &ForwardOptions::default()).unwrap();
        assert!(plain.cache.acc.snapshot(&layout, 1, 0).is_err());
        let stored =
            blocked_forward(&q, &k, &v, &layout, &ForwardOptions::default().two_phase()).unwrap();
        let s = stored.cache.acc.snapshot(&layout, 3, 3).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
        assert_eq!(stored.o, plain.o);
    }

    #[test]
    fn invalid_inputs() {
        let (q, k, v) = random_qkv(10, 4, 5);
        let layout = plan_blocks(12, 4).unwrap();
        assert!(blocked_forward(&q, &k, &v, &layout, &ForwardOptions::default()).is_err());
        let layout = plan_blocks(10, 4).unwrap();
        let opts = ForwardOptions::default().with_skip_eps(1.5);
        assert!(blocked_forward(&q, &k, &v, &layout, &opts).is_err());
        let k_bad = Matrix::zeros(10, 3);
        assert!(blocked_forward(&q, &k_bad, &v, &layout, &ForwardOptions::default()).is_err());
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let (q, k, v) = random_qkv(96, 8, 6);
        let layout = plan_blocks(96, 8).unwrap();
        let seq = blocked_forward(
            &q,
            &k,
            &v,
            &layout,
            &ForwardOptions::default().with_exec(Exec::Sequential),
        )
        .unwrap();
        for t in [1, 2, 8] {
            let par = blocked_forward(
                &q,
                &k,
                &v,
                &layout,
                &ForwardOptions::default().with_exec(Exec::threads(t)),
            )
            .unwrap();
            assert_eq!(par.o, seq.o);
            assert_eq!(par.cache.acc.a, seq.cache.acc.a);
        }
    }

    #[test]
    fn f32_kernel_tracks_reference() {
        let (q, k, v) = random_qkv(70, 8, 7);
        let (o_ref, _) = sb_forward(&q, &k, &v).unwrap();
        let layout = plan_blocks(70, 16).unwrap();
        let out = blocked_forward(
            &q.cast::<f32>(),
            &k.cast(),
            &v.cast(),
            &layout,
            &ForwardOptions::default(),
        )
        .unwrap();
        let scale = o_ref.max_abs();
        assert!(out.o.cast::<f64>().max_abs_diff(&o_ref) / scale < 2e-3);
    }
}
