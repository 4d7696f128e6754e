use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_like::FloatOps;

use crate::error::{Error, Result};

/// Above this argument `softplus(x)` returns `x` unchanged.
pub const SOFTPLUS_THRESHOLD: f64 = 15.0;

/// Floating-point element type used by matrices and kernels.
///
/// Reference paths run in `f64`; the tiled kernels are generic so they can
/// also be benchmarked and validated in `f32`.
pub trait Real:
    FloatOps
    + Copy
    + Default
    + Debug
    + Display
    + PartialOrd
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a · b` (`m×k` times `k×n`) on strided storage.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must lie
    /// inside the corresponding allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_strides: (isize, isize),
        b: *const Self,
        b_strides: (isize, isize),
        c: *mut Self,
        c_strides: (isize, isize),
    );
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        (rsa, csa): (isize, isize),
        b: *const Self,
        (rsb, csb): (isize, isize),
        c: *mut Self,
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc)
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        (rsa, csa): (isize, isize),
        b: *const Self,
        (rsb, csb): (isize, isize),
        c: *mut Self,
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc)
    }
}

/// The handful of float operations the kernels need. Kept local instead of
/// pulling in `num-traits` for six methods.
pub(crate) mod num_like {
    use std::ops::{Add, Div, Mul, Neg, Sub};

    pub trait FloatOps:
        Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + Sized
    {
        fn exp(self) -> Self;
        fn ln_1p(self) -> Self;
        fn exp_m1(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn is_finite(self) -> bool;
        fn max(self, other: Self) -> Self;
    }

    macro_rules! impl_float_ops {
        ($t:ty) => {
            impl FloatOps for $t {
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn ln_1p(self) -> Self {
                    <$t>::ln_1p(self)
                }
                #[inline]
                fn exp_m1(self) -> Self {
                    <$t>::exp_m1(self)
                }
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                #[inline]
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
            }
        };
    }
    impl_float_ops!(f32);
    impl_float_ops!(f64);
}

/// `log(1 + exp(x))`, returning `x` itself above the threshold of 15 so that
/// `exp` never overflows. Below the threshold it is evaluated as
/// `ln_1p(exp(x))`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x <= T::from_f64(SOFTPLUS_THRESHOLD) {
        x.exp().ln_1p()
    } else {
        x
    }
}

/// `log σ(x)` given `log_keep = −softplus(x)`: `x + log_keep` up to the
/// softplus cut-over, `−softplus(−x)` above it.
#[inline]
pub fn log_sigmoid<T: Real>(x: T, log_keep: T) -> T {
    if x > T::from_f64(SOFTPLUS_THRESHOLD) {
        -softplus(-x)
    } else {
        x + log_keep
    }
}

/// Checked [`softplus`]: rejects non-finite input.
pub fn softplus_stable(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain(
            "softplus_stable",
            format!("non-finite input {x}"),
        ));
    }
    Ok(softplus(x))
}

/// Logistic function, evaluated on the branch that never forms `exp` of a
/// positive argument.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub fn sigmoid_checked(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain("sigmoid", format!("non-finite input {x}")));
    }
    Ok(sigmoid(x))
}
