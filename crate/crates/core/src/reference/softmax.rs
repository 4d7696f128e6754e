use super::check_qkv;
use super::position::{
    alibi_bias, alibi_slope, rope_rotate, rope_rotate_inverse, PositionKind, PositionScheme,
};
use super::stick::AttnGrads;
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};

/// Which head of how many; only ALiBi slopes depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadIndex {
    pub index: usize,
    pub count: usize,
}

impl Default for HeadIndex {
    fn default() -> Self {
        Self { index: 0, count: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct SoftmaxCache {
    /// Queries and keys after RoPE (if any).
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Key-major weights `P[(i, j)]`.
    pub weights: Matrix,
    pub scale: f64,
    pub scheme: PositionScheme,
}

#[inline]
fn visible(scheme: &PositionScheme, key: usize, query: usize) -> bool {
    key <= query && scheme.window.is_none_or(|w| query - key < w)
}

/// Causal softmax attention over `i ≤ j` with max subtraction.
pub fn softmax_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scheme: &PositionScheme,
    head: HeadIndex,
) -> Result<(Matrix, SoftmaxCache)> {
    check_qkv("softmax_attention", q, k, v)?;
    scheme.validate()?;
    let (q, k) = match scheme.kind {
        PositionKind::Rope => (rope_rotate(q, scheme)?, rope_rotate(k, scheme)?),
        _ => (q.clone(), k.clone()),
    };
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let slope = match scheme.kind {
        PositionKind::Alibi => alibi_slope(head.index, head.count),
        _ => 0.0,
    };
    let mut p = matmul_nt(&k, &q)?;
    let mut col = vec![0.0; n];
    for j in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (i, c) in col.iter_mut().enumerate().take(j + 1) {
            if visible(scheme, i, j) {
                *c = p[(i, j)] * scale + alibi_bias(slope, i, j);
                max = max.max(*c);
            }
        }
        let mut total = 0.0;
        for (i, c) in col.iter_mut().enumerate().take(j + 1) {
            if visible(scheme, i, j) {
                *c = (*c - max).exp();
                total += *c;
            }
        }
        for i in 0..n {
            p[(i, j)] = if visible(scheme, i, j) {
                col[i] / total
            } else {
                0.0
            };
        }
    }
    let o = matmul_tn(&p, v)?;
    let cache = SoftmaxCache {
        q,
        k,
        v: v.clone(),
        weights: p,
        scale,
        scheme: *scheme,
    };
    Ok((o, cache))
}

pub fn softmax_backward(cache: &SoftmaxCache, d_o: &Matrix) -> Result<AttnGrads> {
    if d_o.shape() != cache.v.shape() {
        return Err(Error::shape(
            "softmax_backward",
            format!("d_o {:?} vs v {:?}", d_o.shape(), cache.v.shape()),
        ));
    }
    let p = &cache.weights;
    let n = p.rows();
    let d_p = matmul_nt(&cache.v, d_o)?;
    let mut d_s = Matrix::zeros(n, n);
    for j in 0..n {
        let mut dot = 0.0;
        for i in 0..=j {
            dot += p[(i, j)] * d_p[(i, j)];
        }
        for i in 0..=j {
            d_s[(i, j)] = p[(i, j)] * (d_p[(i, j)] - dot);
        }
    }
    let mut d_q = matmul_tn(&d_s, &cache.k)?;
    d_q.scale(cache.scale);
    let mut d_k = matmul(&d_s, &cache.q)?;
    d_k.scale(cache.scale);
    if cache.scheme.kind == PositionKind::Rope {
        d_q = rope_rotate_inverse(&d_q, &cache.scheme)?;
        d_k = rope_rotate_inverse(&d_k, &cache.scheme)?;
    }
    let d_v = matmul(p, d_o)?;
    Ok(AttnGrads {
        d_q,
        d_k,
        d_v,
        d_logits: d_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_rel_error, Rng};

    #[test]
    fn equal_logits_give_uniform_weights() {
        let q = Matrix::zeros(6, 4);
        let mut rng = Rng::new(1);
        let v = rng.normal_matrix(6, 4, 1.0);
        let (_, cache) =
            softmax_attention(&q, &q, &v, &PositionScheme::none(), HeadIndex::default()).unwrap();
        for i in 0..4 {
            assert!((cache.weights[(i, 3)] - 0.25).abs() < 1e-15);
        }
        assert_eq!(cache.weights[(4, 3)], 0.0);
    }

    #[test]
    fn window_masks_distant_keys() {
        let q = Matrix::zeros(6, 2);
        let scheme = PositionScheme::none().with_window(2);
        let (_, cache) = softmax_attention(&q, &q, &q, &scheme, HeadIndex::default()).unwrap();
        assert_eq!(cache.weights[(3, 5)], 0.0);
        assert_eq!(cache.weights[(4, 5)], 0.5);
        assert_eq!(cache.weights[(5, 5)], 0.5);
    }

    #[test]
    fn alibi_shifts_logits_linearly() {
        // with zero q/k the weights are proportional to exp(−m(j − i))
        let q = Matrix::zeros(5, 2);
        let (_, cache) = softmax_attention(
            &q,
            &q,
            &q,
            &PositionScheme::alibi(),
            HeadIndex { index: 0, count: 8 },
        )
        .unwrap();
        let ratio = cache.weights[(1, 4)] / cache.weights[(4, 4)];
        assert!((ratio - (-0.5f64 * 3.0).exp()).abs() < 1e-14);
    }

    fn check(scheme: PositionScheme, seed: u64) {
        let n = 16;
        let d = 4;
        let mut rng = Rng::new(seed);
        let (q, k, v) = (
            rng.normal_matrix(n, d, 1.0),
            rng.normal_matrix(n, d, 1.0),
            rng.normal_matrix(n, d, 1.0),
        );
        let target = rng.normal_matrix(n, d, 1.0);
        let head = HeadIndex { index: 1, count: 2 };
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| {
            softmax_attention(q, k, v, &scheme, head)
                .unwrap()
                .0
                .frobenius_dot(&target)
        };
        let (_, cache) = softmax_attention(&q, &k, &v, &scheme, head).unwrap();
        let g = softmax_backward(&cache, &target).unwrap();
        let fq = finite_diff_grad(|x| loss(x, &k, &v), &q, 1e-5).unwrap();
        let fk = finite_diff_grad(|x| loss(&q, x, &v), &k, 1e-5).unwrap();
        let fv = finite_diff_grad(|x| loss(&q, &k, x), &v, 1e-5).unwrap();
        for (name, a, f) in [("q", &g.d_q, &fq), ("k", &g.d_k, &fk), ("v", &g.d_v, &fv)] {
            let err = max_rel_error(a, f);
            assert!(err < 1e-6, "{:?} d_{name}: {err}", scheme.kind);
        }
    }

    #[test]
    fn gradcheck_all_schemes() {
        check(PositionScheme::none(), 2);
        check(PositionScheme::rope(), 3);
        check(PositionScheme::rope_scaled(2.0), 4);
        check(PositionScheme::alibi(), 5);
        check(PositionScheme::none().with_window(3), 6);
    }
}
