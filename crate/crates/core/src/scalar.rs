//! Floating point element types.
//!
//! Training runs in `f32`; gradient checks run the identical code in `f64`.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use num_traits::{Float, FromPrimitive};

/// Element type of a [`Tensor`](crate::Tensor).
pub trait Scalar:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name used in diagnostics.
    const NAME: &'static str;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary element strides.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds for the respective pointer.
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

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64_lossy(v: f64) -> Self {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64_lossy(v: f64) -> Self {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a dense matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> MatRef<'a, S> {
    /// Row-major `rows x cols` matrix.
    pub fn row_major(data: &'a [S], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `cols x rows` matrix, i.e. the same slice
    /// read as `rows x cols`.
    pub fn transposed(data: &'a [S], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, rs: 1, cs: rows }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `out = alpha * a * b + beta * out`, where `out` is row-major `a.rows x b.cols`.
pub(crate) fn gemm<S: Scalar>(alpha: S, a: MatRef<'_, S>, b: MatRef<'_, S>, beta: S, out: &mut [S]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out[..m * n].iter_mut() {
            *v = if beta == S::zero() { S::zero() } else { *v * beta };
        }
        return;
    }
    assert!(a.last_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.last_index() < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: the bounds of all three operands were checked above.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
