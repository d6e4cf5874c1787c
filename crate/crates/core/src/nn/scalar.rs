use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element of network tensors. Training runs in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` over row-major slices with explicit
    /// strides (`rs*`, `cs*`), `a` is `m x k`, `b` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: all three operands were bounds-checked above for the
                // given shapes and non-negative strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T (3x2) times a (2x3) via strides.
        let mut d = [0.0f64; 9];
        f64::gemm(3, 2, 3, 1.0, &a, 1, 3, &a, 3, 1, 0.0, &mut d, 3, 1);
        assert_eq!(d[0], 17.0);
        assert_eq!(d[8], 45.0);
    }
}
