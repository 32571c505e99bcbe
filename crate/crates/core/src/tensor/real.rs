//! Scalar abstraction over `f32` and `f64`.
//!
//! Production code runs in `f32`; the finite-difference oracle instantiates
//! the same kernels in `f64` so the difference quotients are not drowned in
//! single-precision rounding noise.

use num_traits::Float;
use std::fmt;
use std::iter::Sum;

use super::pool::BufPool;

/// Element type of tensors: `f32` or `f64`, with a matching GEMM kernel.
pub trait Real:
    Float + Sum + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// Shared recycling pool for large buffers of this element type.
    #[doc(hidden)]
    fn pool() -> &'static BufPool<Self>;

    /// C ← alpha·A·B + beta·C, with explicit row/column strides per operand.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dimensions and
    /// strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Lossy conversion from `f64`, for constants and tolerances.
    fn from_f64(x: f64) -> Self {
        Self::from(x).expect("finite f64 constant")
    }

    /// Widening conversion for reporting and accumulation in tests.
    fn to_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("real fits in f64")
    }
}

impl Real for f32 {
    fn pool() -> &'static BufPool<f32> {
        super::pool::pool_f32()
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    fn pool() -> &'static BufPool<f64> {
        super::pool::pool_f64()
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
