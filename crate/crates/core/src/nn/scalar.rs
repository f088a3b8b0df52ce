//! Floating-point element trait and the handful of dense matrix products the
//! model needs. All matrices are row-major with an explicit leading dimension.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of parameters and activations.
///
/// `f32` is the working precision; `f64` exists so gradient checks can run the
/// very same code in a shadow precision.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// # Safety
    /// Callers must guarantee that every strided access lies inside the
    /// buffers; [`gemm`] checks this before dispatching.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major view with leading dimension `ld`.
    pub fn rm(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix stored `cols × rows` with leading dimension `ld`.
    pub fn rm_t(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs: 1,
            cs: ld,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Row counts at or below this bypass operand packing.
const SMALL_M: usize = 4;

fn small_gemm<T: Scalar>(a: View<'_, T>, b: View<'_, T>, c: &mut [T], ldc: usize, accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for r in 0..m {
        let out = &mut c[r * ldc..r * ldc + n];
        if !accumulate {
            out.fill(T::zero());
        }
        let arow = |p: usize| a.data[r * a.rs + p * a.cs];
        if b.cs == 1 {
            for p in 0..k {
                let x = arow(p);
                let brow = &b.data[p * b.rs..p * b.rs + n];
                for (o, &w) in out.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        } else {
            let acol: Vec<T> = (0..k).map(arow).collect();
            for (j, o) in out.iter_mut().enumerate() {
                let bcol = &b.data[j * b.cs..j * b.cs + k];
                *o += acol.iter().zip(bcol).map(|(&x, &w)| x * w).sum::<T>();
            }
        }
    }
}

/// `c = a · b + (accumulate ? c : 0)` where `c` is row-major with leading dimension `ldc`.
pub fn gemm<T: Scalar>(a: View<'_, T>, b: View<'_, T>, c: &mut [T], ldc: usize, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.span() <= a.data.len(), "lhs view out of bounds");
    assert!(b.span() <= b.data.len(), "rhs view out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "output view out of bounds");
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                c[r * ldc..r * ldc + n].fill(T::zero());
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: spans checked above.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// [`gemm`] with a direct loop for products of at most `SMALL_M` rows. Its
/// rounding differs from [`gemm`], so only incremental decoding uses it.
pub fn gemm_few_rows<T: Scalar>(a: View<'_, T>, b: View<'_, T>, c: &mut [T], ldc: usize, accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 || k == 0 || m > SMALL_M || !(b.cs == 1 || b.rs == 1) {
        return gemm(a, b, c, ldc, accumulate);
    }
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert!(a.span() <= a.data.len(), "lhs view out of bounds");
    assert!(b.span() <= b.data.len(), "rhs view out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "output view out of bounds");
    small_gemm(a, b, c, ldc, accumulate);
}
