use super::check_qkv;
use crate::error::{Error, Result};
use crate::numerics::{log_sigmoid, matmul, matmul_nt, matmul_tn, sigmoid, softplus, Matrix};

/// Scaled query-key logits, `z[(i, j)] = q_j·k_i / √d` for `i < j`. Entries
/// with `i ≥ j` are zero and never read.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLogits {
    pub z: Matrix,
    pub scale: f64,
}

impl AttnLogits {
    /// Wrap an explicit logit matrix (entries on and below the diagonal
    /// are ignored).
    pub fn from_matrix(z: Matrix) -> Result<Self> {
        if z.rows() != z.cols() {
            return Err(Error::shape(
                "AttnLogits",
                format!("logits must be square, got {:?}", z.shape()),
            ));
        }
        Ok(Self { z, scale: 1.0 })
    }

    pub fn seq_len(&self) -> usize {
        self.z.rows()
    }
}

/// Attention weights `A[(i, j)]`, key-major like [`AttnLogits`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub a: Matrix,
}

impl AttnWeights {
    /// `Σ_i A[(i, j)]` for every query `j`.
    pub fn query_sums(&self) -> Vec<f64> {
        let n = self.a.cols();
        let mut sums = vec![0.0; n];
        for i in 0..self.a.rows() {
            for (s, &x) in sums.iter_mut().zip(self.a.row(i)) {
                *s += x;
            }
        }
        sums
    }
}

/// Everything the analytic backward needs.
#[derive(Debug, Clone)]
pub struct SbCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub logits: AttnLogits,
    pub weights: AttnWeights,
    /// `Σ_{k<j} softplus(z[k,j])` per query: minus the log of the remaining
    /// stick mass.
    pub consumed: Vec<f64>,
}

impl SbCache {
    /// Remaining stick mass `1 − Σ_i A[i,j]`, computed in log space.
    pub fn remaining_mass(&self) -> Vec<f64> {
        self.consumed.iter().map(|c| (-c).exp()).collect()
    }
}

/// Gradients of an attention head with respect to its inputs.
#[derive(Debug, Clone)]
pub struct AttnGrads {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
    /// Gradient with respect to the (pre-scale) logits, key-major.
    pub d_logits: Matrix,
}

pub fn sb_logits(q: &Matrix, k: &Matrix) -> Result<AttnLogits> {
    if q.shape() != k.shape() || q.cols() == 0 {
        return Err(Error::shape(
            "sb_logits",
            format!("q {:?} vs k {:?}", q.shape(), k.shape()),
        ));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut z = matmul_nt(k, q)?;
    let n = z.rows();
    for i in 0..n {
        for j in 0..n {
            z[(i, j)] = if i < j { z[(i, j)] * scale } else { 0.0 };
        }
    }
    Ok(AttnLogits { z, scale })
}

/// Weights from the literal product `σ(z_ij) · Π_{i<k<j} (1 − σ(z_kj))`.
pub fn sb_weights_direct(logits: &AttnLogits) -> AttnWeights {
    let n = logits.seq_len();
    let z = &logits.z;
    let mut a = Matrix::zeros(n, n);
    for j in 0..n {
        let mut remaining = 1.0;
        for i in (0..j).rev() {
            let beta = sigmoid(z[(i, j)]);
            a[(i, j)] = beta * remaining;
            remaining *= 1.0 - beta;
        }
    }
    AttnWeights { a }
}

/// Log-space weights `A_ij = exp(log σ(z_ij) − Σ_{k=i+1}^{j−1} softplus(z_kj))`.
///
/// Also returns the cumulative softplus term `Σ_{k=i}^{j−1} softplus(z_kj)`
/// at every `(i, j)`.
pub fn sb_weights_logspace(logits: &AttnLogits) -> (AttnWeights, Matrix) {
    let n = logits.seq_len();
    let z = &logits.z;
    let mut a = Matrix::zeros(n, n);
    let mut cum = Matrix::zeros(n, n);
    for j in 0..n {
        let mut acc = 0.0;
        for i in (0..j).rev() {
            let sp = softplus(z[(i, j)]);
            a[(i, j)] = (log_sigmoid(z[(i, j)], -sp) - acc).exp();
            acc += sp;
            cum[(i, j)] = acc;
        }
    }
    (AttnWeights { a }, cum)
}

/// Relative position bias implied by stick-breaking:
/// `b_ij = −Σ_{k=i}^{j−1} softplus(z_kj)`, so that `A_ij = exp(z_ij + b_ij)`.
pub fn additive_rpe_bias(logits: &AttnLogits) -> Matrix {
    let (_, cum) = sb_weights_logspace(logits);
    cum.scaled(-1.0)
}

/// `o_j = Σ_{i<j} A_ij v_i`. Row 0 of the output is always zero.
pub fn sb_forward(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, SbCache)> {
    check_qkv("sb_forward", q, k, v)?;
    let logits = sb_logits(q, k)?;
    let (weights, cum) = sb_weights_logspace(&logits);
    let n = q.rows();
    let consumed = (0..n)
        .map(|j| if j == 0 { 0.0 } else { cum[(0, j)] })
        .collect();
    let o = matmul_tn(&weights.a, v)?;
    let cache = SbCache {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        logits,
        weights,
        consumed,
    };
    Ok((o, cache))
}

pub fn sb_backward(cache: &SbCache, d_o: &Matrix) -> Result<AttnGrads> {
    sb_backward_with_mass(cache, d_o, None)
}

/// Backward pass, optionally with an upstream gradient on the remaining
/// stick mass `m_j = 1 − Σ_i A_ij` (used by the remainder variants).
///
/// With `g̃_ij = A_ij · ∂L/∂A_ij`, the logit gradient is
/// `∂L/∂z_ij = g̃_ij − σ(z_ij) Σ_{i' ≤ i} g̃_i'j`: `softplus(z_ij)` enters the
/// log-weight of every key at or before `i`.
pub fn sb_backward_with_mass(
    cache: &SbCache,
    d_o: &Matrix,
    d_mass: Option<&[f64]>,
) -> Result<AttnGrads> {
    let (n, d) = cache.q.shape();
    if d_o.shape() != cache.v.shape() {
        return Err(Error::shape(
            "sb_backward",
            format!("d_o {:?} vs v {:?}", d_o.shape(), cache.v.shape()),
        ));
    }
    if let Some(dm) = d_mass {
        if dm.len() != n {
            return Err(Error::shape(
                "sb_backward",
                format!("d_mass has {} entries, expected {n}", dm.len()),
            ));
        }
    }
    let a = &cache.weights.a;
    let z = &cache.logits.z;
    // (i, j) = v_i · d_o_j
    let d_a = matmul_nt(&cache.v, d_o)?;
    let mut d_z = Matrix::zeros(n, n);
    for j in 0..n {
        let dm = d_mass.map_or(0.0, |m| m[j]);
        let mut running = 0.0;
        for i in 0..j {
            let g = a[(i, j)] * (d_a[(i, j)] - dm);
            running += g;
            d_z[(i, j)] = g - sigmoid(z[(i, j)]) * running;
        }
    }
    let scale = cache.logits.scale;
    let mut d_q = matmul_tn(&d_z, &cache.k)?;
    d_q.scale(scale);
    let mut d_k = matmul(&d_z, &cache.q)?;
    d_k.scale(scale);
    let d_v = matmul(a, d_o)?;
    debug_assert_eq!(d_q.shape(), (n, d));
    Ok(AttnGrads {
        d_q,
        d_k,
        d_v,
        d_logits: d_z,
    })
}

/// Stick-breaking with remainder: the unallocated mass goes to the current
/// value vector, `o_j = Σ A_ij v_i + (1 − Σ A_ij) v_j`.
pub fn sb_forward_remainder(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let (mut o, cache) = sb_forward(q, k, v)?;
    for (j, m) in cache.remaining_mass().into_iter().enumerate() {
        for (x, &vj) in o.row_mut(j).iter_mut().zip(v.row(j)) {
            *x += m * vj;
        }
    }
    Ok(o)
}

/// Recurrent (single-gate selective SSM) form: for each query `j`, scan
/// `ô ← (1 − β_ij) ô + β_ij v_i` over `i = 0 … j−1`; `o_j` is the end state.
pub fn sb_recurrent(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_qkv("sb_recurrent", q, k, v)?;
    let logits = sb_logits(q, k)?;
    let (n, dv) = v.shape();
    let mut o = Matrix::zeros(n, dv);
    let mut state = vec![0.0; dv];
    for j in 0..n {
        state.fill(0.0);
        for i in 0..j {
            let beta = sigmoid(logits.z[(i, j)]);
            for (s, &vi) in state.iter_mut().zip(v.row(i)) {
                *s = (1.0 - beta) * *s + beta * vi;
            }
        }
        o.row_mut(j).copy_from_slice(&state);
    }
    Ok(o)
}
