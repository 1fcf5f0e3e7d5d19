//! Scalar abstraction shared by the signal, autodiff and model code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Besides the usual arithmetic this carries a dense matrix-multiply kernel so
/// the tape can dispatch to the right `matrixmultiply` routine without
/// specialization.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal; never fails for finite input.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    ///
    /// Same contract as `matrixmultiply::dgemm`: every index reachable through
    /// `(m, k, n)` and the strides must lie inside the pointed-to buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
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
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
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

/// Row-major view of one matrix inside a flat buffer, optionally transposed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix, seen as `cols x rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self {
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize
    }
}

/// Safe wrapper over [`Real::gemm_raw`]: `c = a * b + beta * c`.
pub(crate) fn gemm<T: Real>(a: &[T], av: MatView, b: &[T], bv: MatView, beta: T, c: &mut [T]) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(av.max_offset() < a.len(), "gemm lhs out of bounds");
    assert!(bv.max_offset() < b.len(), "gemm rhs out of bounds");
    // Tiny products are dominated by kernel setup; a plain loop is faster.
    if m * k * n <= 512 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    let x = a[i * av.row_stride as usize + p * av.col_stride as usize];
                    let y = b[p * bv.row_stride as usize + j * bv.col_stride as usize];
                    acc += x * y;
                }
                let slot = &mut c[i * n + j];
                *slot = if beta == T::zero() {
                    acc
                } else {
                    beta * *slot + acc
                };
            }
        }
        return;
    }
    // SAFETY: bounds of both operands and the output were asserted above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            av.row_stride,
            av.col_stride,
            b.as_ptr(),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
