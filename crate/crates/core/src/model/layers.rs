//! Row-wise building blocks with explicit backward rules.

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};

pub const NORM_EPS: f64 = 1e-5;

/// Saved statistics of a row normalization.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// `y = (x − mean) / sqrt(var + eps) ⊙ gain + bias`, per row.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<(Matrix, NormCache)> {
    let (n, d) = x.shape();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("{d} features but gain {} / bias {}", gain.len(), bias.len()),
        ));
    }
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for (c, &v) in row.iter().enumerate() {
            let h = (v - mean) * inv;
            xhat[(r, c)] = h;
            y[(r, c)] = h * gain[c] + bias[c];
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

/// Returns `(d_x, d_gain, d_bias)`.
pub fn layer_norm_backward(
    cache: &NormCache,
    gain: &[f64],
    dy: &Matrix,
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut d_gain = vec![0.0; d];
    let mut d_bias = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let xh = cache.xhat.row(r);
        let g = dy.row(r);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..d {
            d_gain[c] += g[c] * xh[c];
            d_bias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        let inv = cache.inv_std[r];
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    (dx, d_gain, d_bias)
}

/// Head-wise group norm: every row of a single head's output is normalized
/// over the head dimension, then scaled and shifted.
pub fn head_group_norm(o_head: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    if o_head.cols() < 2 {
        return Err(Error::shape(
            "head_group_norm",
            "head dimension must be at least 2",
        ));
    }
    Ok(layer_norm(o_head, gain, bias, eps)?.0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `x · w + bias` with `bias` broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, bias: Option<&Matrix>) -> Result<Matrix> {
    let mut y = matmul(x, w)?;
    if let Some(b) = bias {
        if b.shape() != (1, w.cols()) {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} for {} outputs", b.shape(), w.cols()),
            ));
        }
        for r in 0..y.rows() {
            for (o, &bv) in y.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += bv;
            }
        }
    }
    Ok(y)
}

/// Returns `(d_x, d_w, d_bias)` for [`linear`].
pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let dw = matmul_tn(x, dy)?;
    let dx = matmul_nt(dy, w)?;
    Ok((dx, dw, column_sums(dy)))
}

pub fn column_sums(m: &Matrix) -> Matrix {
    let mut s = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in s.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    s
}
