//! Floating-point abstraction shared by the tensor engine, losses and model.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Real scalar type the engine computes in: `f32` or `f64`.
///
/// Besides the usual float arithmetic this carries a dense matrix product,
/// dispatched to the precision-specific `matrixmultiply` kernel.
pub trait Scalar:
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
    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Strides and dimensions must describe memory inside the given pointers.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix products over slices. Lengths are checked, then the
/// call is forwarded to [`Scalar::gemm`].
pub(crate) mod gemm {
    use super::Scalar;

    /// `c (+)= a[m,k] * b[k,n]`
    pub fn nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let beta = if acc { T::one() } else { T::zero() };
        unsafe {
            T::gemm(
                m, k, n, T::one(),
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    /// `c (+)= a[m,k] * b[n,k]^T`
    pub fn nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
        assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
        let beta = if acc { T::one() } else { T::zero() };
        unsafe {
            T::gemm(
                m, k, n, T::one(),
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), 1, k as isize,
                beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    /// `c (+)= a[k,m]^T * b[k,n]`
    pub fn tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
        assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
        let beta = if acc { T::one() } else { T::zero() };
        unsafe {
            T::gemm(
                m, k, n, T::one(),
                a.as_ptr(), 1, m as isize,
                b.as_ptr(), n as isize, 1,
                beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}
