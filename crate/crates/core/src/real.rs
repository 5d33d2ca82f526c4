//! Scalar abstraction shared by the single-precision training path and the
//! double-precision gradient-check path.

use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point element type usable in tensors.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Size of one element in bytes.
    const BYTES: usize;

    fn erf(self) -> Self;

    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c (+)= a * b` with `c` dense row-major `m x n`; `a` and `b` are
    /// addressed through (row, column) strides so transposes are free.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        c: &mut [Self],
        accumulate: bool,
    );
}

impl Real for f32 {
    const BYTES: usize = 4;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        sa: (usize, usize),
        b: &[f32],
        sb: (usize, usize),
        c: &mut [f32],
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        if k > 0 {
            assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
            assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
        }
        assert!(c.len() >= m * n);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the asserts above bound every address the kernel touches.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        sa: (usize, usize),
        b: &[f64],
        sb: (usize, usize),
        c: &mut [f64],
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        if k > 0 {
            assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
            assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
        }
        assert!(c.len() >= m * n);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the asserts above bound every address the kernel touches.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
