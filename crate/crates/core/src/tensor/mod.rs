//! Dense row-major tensors and the reverse-mode differentiation tape.
//!
//! Image tensors use the batch x channels x height x width layout throughout.

mod kernels;
mod tape;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

pub use kernels::gemm;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    /// `n x n` identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn randn<R: RngCore + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    pub fn rand_uniform<R: RngCore + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        use rand::Rng;
        Self::from_fn(shape, |_| T::of(lo + (hi - lo) * rng.random::<f64>()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::of(x.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Element `[n, c, y, x]` of a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cs, hs, ws] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rows `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {} for rank {}", axis, rank)));
        }
        let mut total = 0;
        for p in parts {
            let compatible = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape[d] == first.shape[d]);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {}", p.shape, first.shape, axis),
                ));
            }
            total += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// Batched transpose of the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", r)));
        }
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.numel() / (m * n).max(1);
        let mut data = vec![T::zero(); self.numel()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut data[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Tensor { shape, data })
    }

    /// `b x c x h x w -> b x 4c x h/2 x w/2`. Output channel `4c + 2dy + dx`
    /// holds input pixel `(2i + dy, 2j + dx)` of channel `c`.
    pub fn space_to_channel(&self) -> Result<Self> {
        let [b, c, h, w] = self.dims4("space_to_channel")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "space_to_channel",
                format!("spatial extents {}x{} not divisible by 2", h, w),
            ));
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![T::zero(); self.numel()];
        for n in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let oc = ch * 4 + (y % 2) * 2 + (x % 2);
                        let dst = ((n * 4 * c + oc) * h2 + y / 2) * w2 + x / 2;
                        out[dst] = self.data[((n * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
        Ok(Tensor { shape: vec![b, 4 * c, h2, w2], data: out })
    }

    /// Exact inverse of [`Tensor::space_to_channel`].
    pub fn channel_to_space(&self) -> Result<Self> {
        let [b, c4, h2, w2] = self.dims4("channel_to_space")?;
        if c4 % 4 != 0 {
            return Err(Error::shape("channel_to_space", format!("{} channels not divisible by 4", c4)));
        }
        let (c, h, w) = (c4 / 4, h2 * 2, w2 * 2);
        let mut out = vec![T::zero(); self.numel()];
        for n in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let oc = ch * 4 + (y % 2) * 2 + (x % 2);
                        let src = ((n * c4 + oc) * h2 + y / 2) * w2 + x / 2;
                        out[((n * c + ch) * h + y) * w + x] = self.data[src];
                    }
                }
            }
        }
        Ok(Tensor { shape: vec![b, c, h, w], data: out })
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            s => Err(Error::shape(op, format!("expected rank-4 tensor, got {:?}", s))),
        }
    }

    /// Sum of all elements per leading index, as an `[n]` tensor.
    pub fn sum_per_example(&self) -> Vec<T> {
        let n = self.shape.first().copied().unwrap_or(1).max(1);
        let per = self.numel() / n;
        self.data.chunks(per.max(1)).map(|c| c.iter().copied().sum()).collect()
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed with the extents of `out` (zero along
/// broadcast axes). `shape` must broadcast to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let off = r - shape.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 && out[off + i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits the rows of `out` in row-major order. For each row `f` receives the
/// linear output offset, the matching offsets into two broadcast operands,
/// the row length and the operands' strides along the row.
pub(crate) fn walk_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    // merge adjacent axes that are contiguous for both operands
    let (mut out_c, mut sa_c, mut sb_c) = (Vec::new(), Vec::new(), Vec::new());
    for d in (0..out.len()).rev() {
        if out[d] == 1 {
            continue;
        }
        if let (Some(&n), Some(&a), Some(&b)) = (out_c.last(), sa_c.last(), sb_c.last()) {
            if sa[d] == a * n && sb[d] == b * n {
                *out_c.last_mut().unwrap() = n * out[d];
                continue;
            }
        }
        out_c.push(out[d]);
        sa_c.push(sa[d]);
        sb_c.push(sb[d]);
    }
    out_c.reverse();
    sa_c.reverse();
    sb_c.reverse();
    let (out, sa, sb) = (&out_c[..], &sa_c[..], &sb_c[..]);
    let r = out.len();
    if r == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    while i < total {
        f(i, oa, ob, last, la, lb);
        i += last;
        // advance the odometer over the leading axes
        let mut d = r - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| {
        Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape, b.shape))
    })?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = Vec::with_capacity(numel(&out));
    let (ad, bd) = (&a.data, &b.data);
    walk_broadcast(&out, &sa, &sb, |_, oa, ob, len, la, lb| match (la, lb) {
        (1, 1) => data.extend(ad[oa..oa + len].iter().zip(&bd[ob..ob + len]).map(|(&x, &y)| f(x, y))),
        (1, 0) => {
            let y = bd[ob];
            data.extend(ad[oa..oa + len].iter().map(|&x| f(x, y)));
        }
        (0, 1) => {
            let x = ad[oa];
            data.extend(bd[ob..ob + len].iter().map(|&y| f(x, y)));
        }
        _ => data.extend((0..len).map(|j| f(ad[oa + j * la], bd[ob + j * lb]))),
    });
    Ok(Tensor { shape: out, data })
}

/// Sums `g` down to `target`, the reverse of broadcasting `target` up to
/// `g.shape()`.
pub(crate) fn sum_to_shape<T: Real>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape == target {
        return g.clone();
    }
    if numel(target) == 1 {
        return Tensor { shape: target.to_vec(), data: vec![g.sum()] };
    }
    let st = broadcast_strides(target, &g.shape);
    let zero = vec![0; g.rank()];
    let mut data = vec![T::zero(); numel(target)];
    walk_broadcast(&g.shape, &st, &zero, |i, it, _, len, lt, _| {
        let src = &g.data[i..i + len];
        match lt {
            0 => data[it] += src.iter().copied().sum::<T>(),
            1 => data[it..it + len].iter_mut().zip(src).for_each(|(d, &v)| *d += v),
            _ => src.iter().enumerate().for_each(|(j, &v)| data[it + j * lt] += v),
        }
    });
    Tensor { shape: target.to_vec(), data }
}

/// Broadcasts `t` up to `shape`.
pub(crate) fn expand_to<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape == shape {
        return t.clone();
    }
    let st = broadcast_strides(&t.shape, shape);
    let zero = vec![0; shape.len()];
    let mut data = Vec::with_capacity(numel(shape));
    walk_broadcast(shape, &st, &zero, |_, it, _, len, lt, _| match lt {
        0 => data.extend(core::iter::repeat_n(t.data[it], len)),
        1 => data.extend_from_slice(&t.data[it..it + len]),
        _ => data.extend((0..len).map(|j| t.data[it + j * lt])),
    });
    Tensor { shape: shape.to_vec(), data }
}
