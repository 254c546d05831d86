//! Floating-point scalar abstraction shared by the tensor, model and trainer code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the network can be instantiated over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short dtype tag written into checkpoints.
    const DTYPE: &'static str;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `c += a · b` over strided row/column layouts, `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
    );
}

macro_rules! gemm_impl {
    ($t:ty, $f:path) => {
        fn gemm_strided(
            m: usize,
            k: usize,
            n: usize,
            a: &[$t],
            (rsa, csa): (usize, usize),
            b: &[$t],
            (rsb, csb): (usize, usize),
            c: &mut [$t],
        ) {
            let last = |r: usize, c: usize, rs: usize, cs: usize| {
                if r == 0 || c == 0 { 0 } else { (r - 1) * rs + (c - 1) * cs + 1 }
            };
            assert!(a.len() >= last(m, k, rsa, csa));
            assert!(b.len() >= last(k, n, rsb, csb));
            assert!(c.len() >= last(m, n, n, 1));
            // SAFETY: the asserts above bound every index the kernel touches.
            unsafe {
                $f(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    rsa as isize,
                    csa as isize,
                    b.as_ptr(),
                    rsb as isize,
                    csb as isize,
                    1.0,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                )
            }
        }
    };
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    gemm_impl!(f32, matrixmultiply::sgemm);
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    gemm_impl!(f64, matrixmultiply::dgemm);
}
