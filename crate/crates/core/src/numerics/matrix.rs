use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::scalar::Real;
use crate::error::{Error, Result};
use crate::parallel::Exec;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T: Real = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::ONE } else { T::ZERO })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    fn assert_same_shape(&self, other: &Self, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        self.assert_same_shape(other, "add_scaled");
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += alpha * y;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.assert_same_shape(other, "add_assign");
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(other, -T::ONE);
        out
    }

    pub fn scale(&mut self, alpha: T) {
        for x in &mut self.data {
            *x *= alpha;
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        self.map(|x| x * alpha)
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_dot(&self, other: &Self) -> T {
        self.assert_same_shape(other, "frobenius_dot");
        let mut acc = T::ZERO;
        for (&x, &y) in self.data.iter().zip(&other.data) {
            acc += x * y;
        }
        acc
    }

    pub fn norm_sq(&self) -> T {
        self.frobenius_dot(self)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::ZERO, |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.assert_same_shape(other, "max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::ZERO, |m, (&x, &y)| m.max((x - y).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copy of columns `c0..c1`.
    pub fn col_block(&self, c0: usize, c1: usize) -> Self {
        assert!(
            c0 <= c1 && c1 <= self.cols,
            "col_block {c0}..{c1} out of {}",
            self.cols
        );
        let w = c1 - c0;
        let mut out = Self::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c1]);
        }
        out
    }

    /// Overwrite columns starting at `c0` with `block`.
    pub fn set_col_block(&mut self, c0: usize, block: &Self) {
        assert_eq!(self.rows, block.rows, "set_col_block row mismatch");
        assert!(c0 + block.cols <= self.cols, "set_col_block out of range");
        for r in 0..self.rows {
            let w = block.cols;
            self.row_mut(r)[c0..c0 + w].copy_from_slice(block.row(r));
        }
    }

    /// Copy of rows `r0..r1`.
    pub fn row_block(&self, r0: usize, r1: usize) -> Self {
        assert!(
            r0 <= r1 && r1 <= self.rows,
            "row_block {r0}..{r1} out of {}",
            self.rows
        );
        Self {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }
}

impl<T: Real> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

// Row-major `m×n` output of a strided `m×k` times `k×n` product.
fn gemm_strided<T: Real>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    out: &mut [T],
) {
    assert!(out.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].fill(T::ZERO);
        return;
    }
    let reach = |(rs, cs): (usize, usize), r: usize, c: usize| (r - 1) * rs + (c - 1) * cs;
    assert!(
        reach(a_strides, m, k) < a.len(),
        "gemm left operand out of bounds"
    );
    assert!(
        reach(b_strides, k, n) < b.len(),
        "gemm right operand out of bounds"
    );
    let st = |(rs, cs): (usize, usize)| (rs as isize, cs as isize);
    // SAFETY: the asserts above bound every reachable index of `a`, `b` and
    // `out`; `out` is a unique borrow, so it cannot alias the inputs.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            st(a_strides),
            b.as_ptr(),
            st(b_strides),
            out.as_mut_ptr(),
            (n as isize, 1),
        );
    }
}

fn gemm_rows<T: Real>(a: &Matrix<T>, rows: std::ops::Range<usize>, b: &Matrix<T>, out: &mut [T]) {
    let start = rows.start * a.cols;
    gemm_strided(
        (rows.len(), a.cols, b.cols),
        &a.data[start.min(a.data.len())..],
        (a.cols, 1),
        &b.data,
        (b.cols, 1),
        out,
    );
}

/// `a · b`. Single-threaded and deterministic: the same operands always give
/// bit-identical results.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_with(a, b, Exec::Sequential)
}

/// [`matmul`] parallelized over blocks of output rows. Every output element
/// accumulates over `k` in the same order whatever the row grouping, so
/// results are bit-identical for any worker count.
pub fn matmul_with<T: Real>(a: &Matrix<T>, b: &Matrix<T>, exec: Exec) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    if exec.is_parallel() && a.rows > 1 {
        const CHUNK: usize = 16;
        let n_chunks = a.rows.div_ceil(CHUNK);
        let chunks = exec.map(n_chunks, |c| {
            let r0 = c * CHUNK;
            let r1 = (r0 + CHUNK).min(a.rows);
            let mut buf = vec![T::ZERO; (r1 - r0) * b.cols];
            gemm_rows(a, r0..r1, b, &mut buf);
            buf
        });
        for (c, buf) in chunks.into_iter().enumerate() {
            let start = c * CHUNK * b.cols;
            out.data[start..start + buf.len()].copy_from_slice(&buf);
        }
    } else {
        gemm_rows(a, 0..a.rows, b, &mut out.data);
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})ᵀ times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm_strided(
        (a.cols, a.rows, b.cols),
        &a.data,
        (1, a.cols),
        &b.data,
        (b.cols, 1),
        &mut out.data,
    );
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm_strided(
        (a.rows, a.cols, b.rows),
        &a.data,
        (a.cols, 1),
        &b.data,
        (1, b.cols),
        &mut out.data,
    );
    Ok(out)
}
