use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type used by arrays, the autodiff tape and the model.
///
/// Implemented for `f32` (training builds) and `f64` (verification).
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
    /// Short type name recorded in manifests.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing (for `c`)
    /// storage of the stated extents.
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

    /// In-place `exp` over a slice. Inputs below the underflow threshold
    /// (including `-inf`) produce exactly zero.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn exp_in_place(xs: &mut [f32]) {
        for x in xs {
            *x = exp_f32(*x);
        }
    }

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

/// Branch-free `exp` for f32 (range reduction by ln 2 plus a degree-6
/// polynomial), written so that slice loops vectorize. Relative error is a
/// few ulp.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // adding 1.5 * 2^23 leaves round(x * log2 e) in the low mantissa bits
    const SHIFTER: f32 = 12_582_912.0;
    let underflow = x < -87.0;
    let xc = x.clamp(-87.0, 88.0);
    let z = xc * LOG2E + SHIFTER;
    let n = z - SHIFTER;
    let r = xc - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.666_666_7e-1 + r * (4.166_666_8e-2 + r * (8.333_334e-3 + r * 1.388_889e-3)))));
    let k = z.to_bits().wrapping_sub(SHIFTER.to_bits());
    let scale = f32::from_bits(k.wrapping_add(127) << 23);
    if underflow {
        0.0
    } else {
        p * scale
    }
}

/// Row-major matrix view description: `rows x cols`, optionally transposed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatView {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    /// Logical (rows, cols) after the optional transpose.
    pub fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c (+)= op(a) * op(b)` where `c` is a dense row-major `m x n` block.
pub(crate) fn gemm<T: Scalar>(a: &[T], av: MatView, b: &[T], bv: MatView, c: &mut [T], accumulate: bool) {
    let (m, k) = av.dims();
    let (k2, n) = bv.dims();
    assert_eq!(k, k2, "gemm inner extents");
    assert!(a.len() >= av.rows * av.cols && b.len() >= bv.rows * bv.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = av.strides();
    let (rsb, csb) = bv.strides();
    // SAFETY: extents were checked against the slice lengths above and `c`
    // is an exclusive borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
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
        );
    }
}

/// Strided matrix operand: element `(r, c)` lives at `off + r * rs + c * cs`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strided {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strided {
    pub fn row_major(off: usize, rs: usize) -> Self {
        Strided { off, rs, cs: 1 }
    }

    pub fn col_major(off: usize, cs: usize) -> Self {
        Strided { off, rs: 1, cs }
    }

    fn fits(&self, rows: usize, cols: usize, len: usize) -> bool {
        rows == 0 || cols == 0 || self.off + (rows - 1) * self.rs + (cols - 1) * self.cs < len
    }
}

/// `c = alpha * a * b + beta * c` with `a` `m x k`, `b` `k x n`, `c` `m x n`,
/// all given as strided views into slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strided,
    b: &[T],
    sb: Strided,
    beta: T,
    c: &mut [T],
    sc: Strided,
) {
    assert!(sa.fits(m, k, a.len()) && sb.fits(k, n, b.len()) && sc.fits(m, n, c.len()), "gemm_strided extents");
    if m == 0 || n == 0 || k == 0 {
        assert!(k > 0 || beta == T::one(), "gemm_strided with k == 0");
        return;
    }
    // SAFETY: every addressed element was bounds-checked above and `c` is
    // an exclusive borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(sa.off),
            sa.rs as isize,
            sa.cs as isize,
            b.as_ptr().add(sb.off),
            sb.rs as isize,
            sb.cs as isize,
            beta,
            c.as_mut_ptr().add(sc.off),
            sc.rs as isize,
            sc.cs as isize,
        );
    }
}


/// Sum with a fixed-width accumulator so the loop vectorizes.
#[inline]
pub(crate) fn sum_lanes<T: Scalar>(a: &[T]) -> T {
    const W: usize = 16;
    let mut acc = [T::zero(); W];
    let mut chunks = a.chunks_exact(W);
    for x in &mut chunks {
        for l in 0..W {
            acc[l] += x[l];
        }
    }
    let mut s = chunks.remainder().iter().fold(T::zero(), |s, &x| s + x);
    for v in acc {
        s += v;
    }
    s
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const W: usize = 16;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); W];
    let mut ca = a.chunks_exact(W);
    let mut cb = b.chunks_exact(W);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..W {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s + tail
}
