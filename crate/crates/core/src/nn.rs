//! Minimal CPU building blocks for the classifier: 3×3 convolution via
//! im2col + GEMM, SiLU, and the adjoints needed for back-propagation.
//!
//! Activations are single images stored channel-major (`C × H × W`) in flat
//! slices. Everything is generic over [`Real`] so the same code path runs in
//! `f32` for training and `f64` for finite-difference checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a·b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Every index implied by the dimensions and strides must be in bounds of
    /// the respective slice. [`gemm`] checks this before calling.
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {
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

impl Real for f64 {
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

/// A read-only strided matrix view over a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = a·b + beta·c` where `c` is row-major `a.rows × b.cols`.
pub fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "output too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds of all three views were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Spatial geometry of one 3×3, padding-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub h_in: usize,
    pub w_in: usize,
}

impl ConvGeom {
    pub const K: usize = 3;

    pub fn h_out(&self) -> usize {
        (self.h_in - 1) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w_in - 1) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.cin * Self::K * Self::K
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out() * self.w_out()
    }
}

/// Unfold `input` (`cin × h × w`) into `patch_len × out_pixels` columns.
pub fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut Vec<T>) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let n = ho * wo;
    cols.clear();
    cols.resize(g.patch_len() * n, T::zero());
    for ci in 0..g.cin {
        let plane = &input[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= g.h_in {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w_in..][..g.w_in];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && (ix as usize) < g.w_in {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], grad_in: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let n = ho * wo;
    grad_in.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..g.cin {
        let plane = &mut grad_in[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= g.h_in {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w_in..][..g.w_in];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && (ix as usize) < g.w_in {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = W·cols + b`, with `W` row-major `cout × patch_len`.
pub fn conv_forward<T: Real>(g: &ConvGeom, weight: &[T], bias: &[T], cols: &[T], out: &mut Vec<T>) {
    let n = g.out_pixels();
    out.clear();
    out.reserve(g.cout * n);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, n));
    }
    gemm(
        MatRef::row_major(weight, g.cout, g.patch_len()),
        MatRef::row_major(cols, g.patch_len(), n),
        T::one(),
        out,
    );
}

/// Accumulate weight/bias gradients and produce the input-column gradient.
pub fn conv_backward<T: Real>(
    g: &ConvGeom,
    weight: &[T],
    cols: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    grad_cols: Option<&mut Vec<T>>,
) {
    let n = g.out_pixels();
    let k = g.patch_len();
    let dout = MatRef::row_major(grad_out, g.cout, n);
    // dW += dOut · colsᵀ
    gemm(dout, MatRef::row_major(cols, k, n).t(), T::one(), grad_w);
    for (co, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out[co * n..(co + 1) * n].iter().copied().sum::<T>();
    }
    if let Some(gc) = grad_cols {
        gc.clear();
        gc.resize(k * n, T::zero());
        // dCols = Wᵀ · dOut
        gemm(MatRef::row_major(weight, g.cout, k).t(), dout, T::zero(), gc);
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub fn silu<T: Real>(z: T) -> T {
    z * sigmoid(z)
}

pub fn silu_grad<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}
