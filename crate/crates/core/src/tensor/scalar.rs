use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

/// Floating-point element type. `f32` is used for training, `f64` for
/// gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const BITS: u32;

    /// # Safety
    /// Pointers and strides must describe in-bounds `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
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
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const BITS: u32 = 32;

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
    const BITS: u32 = 64;

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

/// Strided read-only matrix view over a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    /// Row-major `rows x cols` view of `data[..rows * cols]`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view exceeds buffer");
        MatRef { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// Row-major view starting at `offset` with an explicit row stride.
    pub fn strided(data: &'a [T], offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        let view = MatRef { data, offset, rows, cols, rs: row_stride, cs: 1 };
        view.check_bounds();
        view
    }

    pub fn t(self) -> Self {
        MatRef { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    pub fn row_range(self, start: usize, end: usize) -> Self {
        debug_assert!(start <= end && end <= self.rows);
        MatRef { offset: self.offset + start * self.rs, rows: end - start, ..self }
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[self.offset + i * self.rs + j * self.cs]
    }

    fn check_bounds(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view exceeds buffer");
        }
    }
}

/// Output rows per parallel task. Fixed so results do not depend on the
/// worker count.
const ROW_CHUNK: usize = 64;
const PAR_MIN_WORK: usize = 1 << 18;

/// `c = alpha * a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    a.check_bounds();
    b.check_bounds();
    let run = |a: MatRef<'_, T>, c: &mut [T]| {
        // SAFETY: views were bounds-checked above; `c` is an exclusive slice
        // of exactly `a.rows * n` elements.
        unsafe {
            T::gemm_raw(
                a.rows,
                k,
                n,
                alpha,
                a.data.as_ptr().add(a.offset),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr().add(b.offset),
                b.rs as isize,
                b.cs as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    };
    if m * n * k < PAR_MIN_WORK || m <= ROW_CHUNK {
        run(a, c);
    } else {
        c.par_chunks_mut(ROW_CHUNK * n).enumerate().for_each(|(i, chunk)| {
            let start = i * ROW_CHUNK;
            let end = start + chunk.len() / n;
            run(a.row_range(start, end), chunk);
        });
    }
}
