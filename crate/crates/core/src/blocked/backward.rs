use super::forward::BlockedCache;
use super::tile::{axpy, dot, visible_keys, RowScratch};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::parallel::Exec;

#[derive(Debug, Clone)]
pub struct BlockedGrads<T: Real = f64> {
    pub d_q: Matrix<T>,
    pub d_k: Matrix<T>,
    pub d_v: Matrix<T>,
    /// Tiles that produced a key/value gradient contribution.
    pub tiles_written: usize,
}

pub(crate) fn check_upstream<T: Real>(
    op: &'static str,
    cache: &BlockedCache<T>,
    d_o: &Matrix<T>,
    d_mass: Option<&[T]>,
) -> Result<()> {
    if d_o.shape() != cache.v.shape() {
        return Err(Error::shape(
            op,
            format!("d_o {:?} vs v {:?}", d_o.shape(), cache.v.shape()),
        ));
    }
    if let Some(dm) = d_mass {
        if dm.len() != cache.layout.seq_len {
            return Err(Error::shape(
                op,
                format!(
                    "d_mass has {} entries, expected {}",
                    dm.len(),
                    cache.layout.seq_len
                ),
            ));
        }
    }
    Ok(())
}

/// `g[c] = w[c] · (d_o_j · v_i − d_mass_j)` for the visible keys `i`.
pub(crate) fn weight_grads<T: Real>(
    scratch: &RowScratch<T>,
    v: &Matrix<T>,
    keys: std::ops::Range<usize>,
    d_o_row: &[T],
    d_mass: T,
    g: &mut Vec<T>,
) {
    g.clear();
    for (c, i) in keys.enumerate() {
        g.push(scratch.w[c] * (dot(d_o_row, v.row(i)) - d_mass));
    }
}

struct Partial<T> {
    d_q: Vec<T>,
    key_start: usize,
    d_k: Vec<T>,
    d_v: Vec<T>,
    tiles: usize,
}

pub fn blocked_backward_fused<T: Real>(
    cache: &BlockedCache<T>,
    d_o: &Matrix<T>,
    exec: Exec,
) -> Result<BlockedGrads<T>> {
    blocked_backward_fused_with_mass(cache, d_o, None, exec)
}

/// Fused tiled backward pass.
///
/// Each query block replays its tiles left to right. The forward
/// accumulator is rolled back by the tile's row sums before the weights are
/// recomputed, and the running weight-gradient sum `b` carries the
/// cumulative term across tiles. Key and value gradients go to a private
/// buffer per query block; the buffers are summed in query-block order.
///
/// `d_mass` is an optional upstream gradient on the remaining stick mass.
pub fn blocked_backward_fused_with_mass<T: Real>(
    cache: &BlockedCache<T>,
    d_o: &Matrix<T>,
    d_mass: Option<&[T]>,
    exec: Exec,
) -> Result<BlockedGrads<T>> {
    check_upstream("blocked_backward_fused", cache, d_o, d_mass)?;
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

    let partials = exec.map(layout.n_blocks, |qb| {
        let rows = layout.range(qb);
        let first = acc.first_key_block[qb];
        let key_start = layout.range(first).start;
        let key_len = rows.end - key_start;
        let silent = rows.clone().all(|j| {
            d_o.row(j).iter().all(|&x| x == T::ZERO) && d_mass.is_none_or(|m| m[j] == T::ZERO)
        });
        if silent {
            return Partial {
                d_q: Vec::new(),
                key_start,
                d_k: Vec::new(),
                d_v: Vec::new(),
                tiles: 0,
            };
        }
        let mut d_q = vec![T::ZERO; rows.len() * d];
        let mut d_k = vec![T::ZERO; key_len * d];
        let mut d_v = vec![T::ZERO; key_len * dv];
        let mut a: Vec<T> = acc.a[rows.clone()].to_vec();
        let mut b = vec![T::ZERO; rows.len()];
        let mut scratch = RowScratch::with_capacity(layout.block);
        let mut g = Vec::with_capacity(layout.block);
        let mut tiles = 0;
        for kb in first..=qb {
            let keys = layout.range(kb);
            for (r, j) in rows.clone().enumerate() {
                let vis = visible_keys(&keys, j);
                if vis.is_empty() {
                    continue;
                }
                let row_sum = scratch.load(q.row(j), k, vis.clone(), scale);
                a[r] -= row_sum;
                scratch.weights(a[r]);
                let d_o_row = d_o.row(j);
                let dm = d_mass.map_or(T::ZERO, |m| m[j]);
                weight_grads(&scratch, v, vis.clone(), d_o_row, dm, &mut g);
                b[r] = scratch.logit_grads(&mut g, b[r]);
                let dq_row = &mut d_q[r * d..(r + 1) * d];
                for (c, i) in vis.enumerate() {
                    let dz = g[c] * scale;
                    axpy(dz, k.row(i), dq_row);
                    let off = i - key_start;
                    axpy(dz, q.row(j), &mut d_k[off * d..(off + 1) * d]);
                    axpy(scratch.w[c], d_o_row, &mut d_v[off * dv..(off + 1) * dv]);
                }
            }
            tiles += 1;
        }
        Partial {
            d_q,
            key_start,
            d_k,
            d_v,
            tiles,
        }
    });

    let mut grads = BlockedGrads {
        d_q: Matrix::zeros(n, d),
        d_k: Matrix::zeros(n, d),
        d_v: Matrix::zeros(n, dv),
        tiles_written: 0,
    };
    for (qb, p) in partials.into_iter().enumerate() {
        grads.tiles_written += p.tiles;
        if p.tiles == 0 {
            continue;
        }
        let start = layout.range(qb).start;
        grads.d_q.data_mut()[start * d..start * d + p.d_q.len()].copy_from_slice(&p.d_q);
        add_rows(&mut grads.d_k, p.key_start, &p.d_k);
        add_rows(&mut grads.d_v, p.key_start, &p.d_v);
    }
    Ok(grads)
}

fn add_rows<T: Real>(dst: &mut Matrix<T>, row_start: usize, src: &[T]) {
    let off = row_start * dst.cols();
    for (o, &x) in dst.data_mut()[off..off + src.len()].iter_mut().zip(src) {
        *o += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocked::{blocked_forward, plan_blocks, ForwardOptions};
    use crate::numerics::Rng;
    use crate::reference::{sb_backward, sb_backward_with_mass, sb_forward};

    fn setup(
        n: usize,
        d: usize,
        block: usize,
        seed: u64,
    ) -> (BlockedCache, Matrix, crate::reference::SbCache) {
        let mut rng = Rng::new(seed);
        let q = rng.normal_matrix(n, d, 1.0);
        let k = rng.normal_matrix(n, d, 1.0);
        let v = rng.normal_matrix(n, d, 1.0);
        let d_o = rng.normal_matrix(n, d, 1.0);
        let layout = plan_blocks(n, block).unwrap();
        let fwd = blocked_forward(&q, &k, &v, &layout, &ForwardOptions::default()).unwrap();
        let (_, rc) = sb_forward(&q, &k, &v).unwrap();
        (fwd.cache, d_o, rc)
    }

    #[test]
    fn matches_reference_backward() {
        let (cache, d_o, rc) = setup(128, 16, 32, 11);
        let g = blocked_backward_fused(&cache, &d_o, Exec::default()).unwrap();
        let r = sb_backward(&rc, &d_o).unwrap();
        assert!(g.d_q.max_abs_diff(&r.d_q) < 1e-9);
        assert!(g.d_k.max_abs_diff(&r.d_k) < 1e-9);
        assert!(g.d_v.max_abs_diff(&r.d_v) < 1e-9);
        assert_eq!(g.tiles_written, cache.layout.n_tiles());
    }

    #[test]
    fn tail_blocks_and_mass_gradient() {
        let (cache, d_o, rc) = setup(77, 8, 16, 12);
        let dm: Vec<f64> = (0..77).map(|j| (j as f64 * 0.37).sin()).collect();
        let g =
            blocked_backward_fused_with_mass(&cache, &d_o, Some(&dm), Exec::Sequential).unwrap();
        let r = sb_backward_with_mass(&rc, &d_o, Some(&dm)).unwrap();
        assert!(g.d_q.max_abs_diff(&r.d_q) < 1e-9);
        assert!(g.d_k.max_abs_diff(&r.d_k) < 1e-9);
        assert!(g.d_v.max_abs_diff(&r.d_v) < 1e-9);
    }

    #[test]
    fn zero_upstream_writes_nothing() {
        let (cache, d_o, _) = setup(64, 4, 16, 13);
        let zero = Matrix::zeros(d_o.rows(), d_o.cols());
        let g = blocked_backward_fused(&cache, &zero, Exec::default()).unwrap();
        assert_eq!(g.tiles_written, 0);
        assert_eq!(g.d_q.max_abs(), 0.0);
        assert_eq!(g.d_k.max_abs(), 0.0);
        assert_eq!(g.d_v.max_abs(), 0.0);
    }

    #[test]
    fn bit_identical_across_workers() {
        let (cache, d_o, _) = setup(160, 8, 16, 14);
        let one = blocked_backward_fused(&cache, &d_o, Exec::threads(1)).unwrap();
        let eight = blocked_backward_fused(&cache, &d_o, Exec::threads(8)).unwrap();
        let seq = blocked_backward_fused(&cache, &d_o, Exec::Sequential).unwrap();
        for other in [&eight, &seq] {
            assert_eq!(one.d_q, other.d_q);
            assert_eq!(one.d_k, other.d_k);
            assert_eq!(one.d_v, other.d_v);
        }
    }

    #[test]
    fn rejects_bad_upstream() {
        let (cache, _, _) = setup(20, 4, 8, 15);
        assert!(blocked_backward_fused(&cache, &Matrix::zeros(20, 3), Exec::Sequential).is_err());
        let dm = vec![0.0; 19];
        assert!(blocked_backward_fused_with_mass(
            &cache,
            &Matrix::zeros(20, 4),
            Some(&dm),
            Exec::Sequential
        )
        .is_err());
    }
}
