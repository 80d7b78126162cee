use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type a [`Tensor`](crate::Tensor) can hold.
///
/// `f64` is the default everywhere; `f32` trades gradient-check tightness
/// for throughput.
pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    ///
    /// Every addressed element of `a` (m×k), `b` (k×n) and `c` (m×n) must be
    /// in bounds for the given strides.
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

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

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

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

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

/// Read-only strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c (+)= a·b` with `c` row-major and contiguous.
pub(crate) fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    gemm_strided(a, b, c, b.cols, accumulate)
}

/// `c (+)= a·b` with `c` row-major, rows `ldc` elements apart.
pub(crate) fn gemm_strided<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], ldc: usize, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert!(ldc >= b.cols, "gemm output stride");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    assert!(c.len() >= (a.rows - 1) * ldc + b.cols, "gemm output out of bounds");
    if a.cols == 0 {
        if !accumulate {
            for r in 0..a.rows {
                c[r * ldc..r * ldc + b.cols].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds were checked above for all three operands.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
