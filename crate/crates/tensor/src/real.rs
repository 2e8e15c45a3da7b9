use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar element type of a tensor. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// `c = a · b + beta · c` for strided row/column-major views.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`. Strides are in
    /// elements; every addressed element must lie inside its slice.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Plain `i-p-j` product. Every output element is accumulated over `p` in
/// ascending order starting from zero, whatever the operand layouts.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    // pack b row-major so the inner loop runs over contiguous memory
    let packed: Vec<T>;
    let b: &[T] = if csb == 1 && rsb == n {
        &b[..k * n]
    } else {
        packed = (0..k)
            .flat_map(|p| (0..n).map(move |j| p * rsb + j * csb))
            .map(|idx| b[idx])
            .collect();
        &packed
    };
    let mut acc = vec![T::zero(); n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = T::zero());
        for p in 0..k {
            let aip = a[i * rsa + p * csa];
            for (x, &bj) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *x = *x + aip * bj;
            }
        }
        for (j, &x) in acc.iter().enumerate() {
            let cij = &mut c[i * rsc + j * csc];
            *cij = if beta == T::zero() { x } else { beta * *cij + x };
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (usize, usize),
                b: &[Self],
                (rsb, csb): (usize, usize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (usize, usize),
            ) {
                assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
                assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
                assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: out out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // matrixmultiply's kernels give each row the same result whatever `m`
                // is (checked over layouts and widths), which keeps predictions
                // batch independent. Empty inner dimensions stay on the loop.
                if k == 0 {
                    small_gemm(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c, (rsc, csc));
                    return;
                }
                // SAFETY: every element addressed through the strides lies inside
                // the slices (checked above); `c` is uniquely borrowed and does not
                // alias `a` or `b`.
                unsafe {
                    $gemm(
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
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
