use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of the tensor engine. Training runs in `f32`,
/// gradient verification in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    const NAME: &'static str;

    /// Raw strided GEMM, `c = alpha * a @ b + beta * c`.
    ///
    /// # Safety
    /// All pointers must be valid for the given shapes and strides.
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

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided matrix view into a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F: Scalar> MatRef<'a, F> {
    /// Row-major contiguous matrix.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        MatRef { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a [F], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        MatRef { data, offset, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn rows_from(self, start: usize, count: usize) -> Self {
        MatRef {
            offset: self.offset + start * self.rs,
            rows: count,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c[m, n] (row stride ldc) = a @ b + (accumulate ? c : 0)`.
pub fn gemm_into<F: Scalar>(a: MatRef<'_, F>, b: MatRef<'_, F>, c: &mut [F], ldc: usize, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n, "output buffer too small");
    a.check();
    b.check();
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                c[r * ldc..r * ldc + n].iter_mut().for_each(|x| *x = F::zero());
            }
        }
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

const ROW_CHUNK: usize = 64;

/// Row-parallel contiguous matmul: `c[m, n] (+)= a @ b`.
pub fn matmul<F: Scalar>(a: MatRef<'_, F>, b: MatRef<'_, F>, c: &mut [F], accumulate: bool) {
    let (m, n) = (a.rows, b.cols);
    assert_eq!(c.len(), m * n);
    if m <= ROW_CHUNK || n == 0 {
        gemm_into(a, b, c, n, accumulate);
        return;
    }
    crate::par::for_each_chunk_mut(c, ROW_CHUNK * n, |ci, chunk| {
        let rows = chunk.len() / n;
        gemm_into(a.rows_from(ci * ROW_CHUNK, rows), b, chunk, n, accumulate);
    });
}
