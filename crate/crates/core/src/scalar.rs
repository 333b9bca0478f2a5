//! Scalar abstraction so the numeric core runs in f32 (training) or f64
//! (gradient checking) without duplicated code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type of all tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a @ b + beta * c` for row-major `a (m x k)`, `b (k x n)`,
    /// `c (m x n)`. Dispatches to the matching matrixmultiply kernel.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Strided gemm for transposed views; `rs*`/`cs*` are row/column strides
    /// in elements. All strides here are non-negative.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: usize, csa: usize,
        b: &[Self], rsb: usize, csb: usize,
        beta: Self,
        c: &mut [Self], rsc: usize, csc: usize,
    );

    /// Total conversion from f64 (used for RNG draws shared across precisions).
    fn from_f64_lossy(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! check_gemm_dims {
    ($m:ident, $k:ident, $n:ident, $a:ident, $b:ident, $c:ident) => {
        assert_eq!($a.len(), $m * $k, "gemm: lhs length");
        assert_eq!($b.len(), $k * $n, "gemm: rhs length");
        assert_eq!($c.len(), $m * $n, "gemm: out length");
    };
}

#[inline]
fn check_strided(rows: usize, cols: usize, rs: usize, cs: usize, len: usize, what: &str) {
    if rows > 0 && cols > 0 {
        let max = (rows - 1) * rs + (cols - 1) * cs;
        assert!(max < len, "gemm_strided: {what} index {max} out of bounds {len}");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: $t, a: &[$t], b: &[$t], beta: $t, c: &mut [$t]) {
                check_gemm_dims!(m, k, n, a, b, c);
                unsafe {
                    $kernel(
                        m, k, n, alpha,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_strided(
                m: usize, k: usize, n: usize,
                alpha: $t,
                a: &[$t], rsa: usize, csa: usize,
                b: &[$t], rsb: usize, csb: usize,
                beta: $t,
                c: &mut [$t], rsc: usize, csc: usize,
            ) {
                check_strided(m, k, rsa, csa, a.len(), "lhs");
                check_strided(k, n, rsb, csb, b.len(), "rhs");
                check_strided(m, n, rsc, csc, c.len(), "out");
                unsafe {
                    $kernel(
                        m, k, n, alpha,
                        a.as_ptr(), rsa as isize, csa as isize,
                        b.as_ptr(), rsb as isize, csb as isize,
                        beta,
                        c.as_mut_ptr(), rsc as isize, csc as isize,
                    );
                }
            }

            fn from_f64_lossy(x: f64) -> $t {
                x as $t
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
