use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of the kernel: `f32` for training, `f64` for
/// gradient checking.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; see [`matrixmultiply::sgemm`].
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

const SMALL_ROWS: usize = 4;
const SMALL_VOLUME: usize = 8192;

/// Direct loops for products too small to amortize packing.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Scalar>(
    m: usize,
    p: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let mut gathered = if trans_a { vec![T::zero(); p] } else { Vec::new() };
    for (i, row) in c.chunks_exact_mut(n).enumerate() {
        let arow: &[T] = if trans_a {
            for (t, g) in gathered.iter_mut().enumerate() {
                *g = a[t * m + i];
            }
            &gathered
        } else {
            &a[i * p..(i + 1) * p]
        };
        if beta == T::zero() {
            row.iter_mut().for_each(|x| *x = T::zero());
        } else if beta != T::one() {
            row.iter_mut().for_each(|x| *x = *x * beta);
        }
        if trans_b {
            for (out, brow) in row.iter_mut().zip(b.chunks_exact(p)) {
                let acc = arow
                    .iter()
                    .zip(brow)
                    .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                *out = *out + acc;
            }
        } else {
            for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
                for (out, &bv) in row.iter_mut().zip(brow) {
                    *out = *out + av * bv;
                }
            }
        }
    }
}

/// `c[m,n] = op(a)[m,p] * op(b)[p,n] + beta * c`, all row-major.
///
/// With `trans_a` the buffer `a` holds a `p x m` matrix, with `trans_b` the
/// buffer `b` holds an `n x p` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    p: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * p, "gemm: lhs length");
    assert_eq!(b.len(), p * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if p > 0 && (m <= SMALL_ROWS || m * p * n <= SMALL_VOLUME) {
        return small_gemm(m, p, n, a, trans_a, b, trans_b, beta, c);
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (p as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, p as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: lengths checked above match the strides chosen for each layout.
    unsafe {
        T::gemm_raw(
            m,
            p,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
