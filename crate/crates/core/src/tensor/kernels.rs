//! Plain-loop matrix and convolution kernels.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[inline(always)]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y += (a0 x0 + a1 x1) + (a2 x2 + a3 x3)`.
#[inline(always)]
fn axpy4<T: Real>(a: [T; 4], x: [&[T]; 4], y: &mut [T]) {
    let [x0, x1, x2, x3] = x;
    for ((((yi, &v0), &v1), &v2), &v3) in y.iter_mut().zip(x0).zip(x1).zip(x2).zip(x3) {
        *yi += (a[0] * v0 + a[1] * v1) + (a[2] * v2 + a[3] * v3);
    }
}

#[inline(always)]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&a, &b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

/// `crow += sum_p coef(p) * b[p]`, four rows of `b` at a time.
#[inline(always)]
fn accumulate_rows<T: Real>(crow: &mut [T], k: usize, n: usize, b: &[T], coef: impl Fn(usize) -> T) {
    let mut p = 0;
    while p + 4 <= k {
        let a = [coef(p), coef(p + 1), coef(p + 2), coef(p + 3)];
        let rows = [&b[p * n..][..n], &b[(p + 1) * n..][..n], &b[(p + 2) * n..][..n], &b[(p + 3) * n..][..n]];
        axpy4(a, rows, crow);
        p += 4;
    }
    while p < k {
        axpy(coef(p), &b[p * n..][..n], crow);
        p += 1;
    }
}

#[inline(always)]
fn gemm_body<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        accumulate_rows(&mut c[i * n..(i + 1) * n], k, n, b, |p| arow[p]);
    }
}

#[inline(always)]
fn gemm_nt_body<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline(always)]
fn gemm_tn_body<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        accumulate_rows(&mut c[i * n..(i + 1) * n], k, n, b, |p| a[p * m + i]);
    }
}

/// Element-wise results are identical with and without AVX: the kernels use
/// no fused operations and a fixed accumulation order.
#[cfg(all(feature = "std", target_arch = "x86_64"))]
mod wide {
    use super::*;

    pub(super) fn available() -> bool {
        static AVX2: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
        *AVX2.get_or_init(|| std::is_x86_feature_detected!("avx2"))
    }

    #[target_feature(enable = "avx2")]
    pub(super) fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        gemm_body(a, b, c, m, k, n)
    }

    #[target_feature(enable = "avx2")]
    pub(super) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        gemm_nt_body(a, b, c, m, k, n)
    }

    #[target_feature(enable = "avx2")]
    pub(super) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        gemm_tn_body(a, b, c, m, k, n)
    }
}

macro_rules! dispatch {
    ($name:ident, $body:ident, $a:expr, $b:expr, $c:expr, $m:expr, $k:expr, $n:expr) => {{
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        if wide::available() {
            // SAFETY: the CPU supports AVX2, checked at runtime.
            unsafe { wide::$name($a, $b, $c, $m, $k, $n) };
            return;
        }
        $body($a, $b, $c, $m, $k, $n)
    }};
}

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
pub fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    dispatch!(gemm, gemm_body, a, b, c, m, k, n)
}

/// `c[m x n] += a[m x k] * b[n x k]^T`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    dispatch!(gemm_nt, gemm_nt_body, a, b, c, m, k, n)
}

/// `c[m x n] += a[k x m]^T * b[k x n]`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    dispatch!(gemm_tn, gemm_tn_body, a, b, c, m, k, n)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// `[b, c, p]` to `[c, b * p]`.
fn to_channel_major<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        for n in 0..b {
            out.extend_from_slice(&x[(n * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[c, b * p]` to `[b, c, p]`.
fn from_channel_major<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for n in 0..b {
        for ch in 0..c {
            out.extend_from_slice(&x[ch * b * p + n * p..][..p]);
        }
    }
    out
}

/// Valid output columns `[lo, hi)` for kernel offset `dx`.
#[inline]
fn valid_range(d: usize, pad: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d).min(len_out);
    let hi = (len_in + pad).saturating_sub(d).min(len_out).max(lo);
    (lo, hi)
}

/// Unfolds image `n` into columns `n * p .. (n + 1) * p` of a `[k, b * p]` matrix.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], col: &mut [T], n: usize) {
    let p = g.p();
    let ld = g.b * p;
    for c in 0..g.ci {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            let (ylo, yhi) = valid_range(dy, g.pad, g.h, g.oh);
            for dx in 0..g.kw {
                let (xlo, xhi) = valid_range(dx, g.pad, g.w, g.ow);
                let row = &mut col[((c * g.kh + dy) * g.kw + dx) * ld + n * p..][..p];
                row[..ylo * g.ow].fill(T::zero());
                row[yhi * g.ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy + dy - g.pad;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if xhi > xlo {
                        let sx = xlo + dx - g.pad;
                        dst[xlo..xhi].copy_from_slice(&plane[iy * g.w + sx..iy * g.w + sx + (xhi - xlo)]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, col: &[T], img: &mut [T], n: usize) {
    let p = g.p();
    let ld = g.b * p;
    for c in 0..g.ci {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for dy in 0..g.kh {
            let (ylo, yhi) = valid_range(dy, g.pad, g.h, g.oh);
            for dx in 0..g.kw {
                let (xlo, xhi) = valid_range(dx, g.pad, g.w, g.ow);
                if xhi <= xlo {
                    continue;
                }
                let row = &col[((c * g.kh + dy) * g.kw + dx) * ld + n * p..][..p];
                for oy in ylo..yhi {
                    let iy = oy + dy - g.pad;
                    let sx = xlo + dx - g.pad;
                    let dst = &mut plane[iy * g.w + sx..iy * g.w + sx + (xhi - xlo)];
                    for (d, &v) in dst.iter_mut().zip(&row[oy * g.ow + xlo..oy * g.ow + xhi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// The `[k, b * p]` patch matrix of the whole batch.
fn unfold<T: Real>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    if g.is_pointwise() {
        return to_channel_major(input, g.b, g.ci, g.p());
    }
    let img_len = g.ci * g.h * g.w;
    let mut col = vec![T::zero(); g.k() * g.b * g.p()];
    for n in 0..g.b {
        im2col(g, &input[n * img_len..(n + 1) * img_len], &mut col, n);
    }
    col
}

/// Cross-correlation of `input` with `kernel` (no flip), stride 1. Also
/// returns the patch matrix when `keep_col` is set.
pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    keep_col: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (k, p) = (g.k(), g.p());
    let col = unfold(g, input);
    let mut out = vec![T::zero(); g.co * g.b * p];
    gemm(kernel, &col, &mut out, g.co, k, g.b * p);
    (from_channel_major(&out, g.b, g.co, p), keep_col.then_some(col))
}

/// Gradients of a convolution with respect to its input and kernel. `col`
/// is the patch matrix saved by the forward pass, if any.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    need_input: bool,
    need_kernel: bool,
    col: Option<&[T]>,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.k(), g.p());
    let bp = g.b * p;
    let go = to_channel_major(grad_out, g.b, g.co, p);
    let gk = need_kernel.then(|| {
        let mut gk = vec![T::zero(); g.co * k];
        match col {
            Some(col) => gemm_nt(&go, col, &mut gk, g.co, bp, k),
            None => gemm_nt(&go, &unfold(g, input), &mut gk, g.co, bp, k),
        }
        gk
    });
    let gin = need_input.then(|| {
        let mut gcol = vec![T::zero(); k * bp];
        gemm_tn(kernel, &go, &mut gcol, k, g.co, bp);
        if g.is_pointwise() {
            return from_channel_major(&gcol, g.b, g.ci, p);
        }
        let img_len = g.ci * g.h * g.w;
        let mut gin = vec![T::zero(); g.b * img_len];
        for n in 0..g.b {
            col2im(g, &gcol, &mut gin[n * img_len..(n + 1) * img_len], n);
        }
        gin
    });
    (gin, gk)
}
