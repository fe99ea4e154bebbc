//! Raw compute loops shared by the tape operations.
//!
//! Every kernel writes each output element from exactly one thread in a fixed
//! reduction order, so results do not depend on the rayon pool size.

use rayon::prelude::*;

use super::{contiguous_strides, Scalar};

/// Work (multiply-adds) below which kernels stay single threaded.
const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m,n] += a[m,k] @ b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,n] += a[m,k] @ b[n,k]^T`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *cv += dot(a_row, b_row);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,n] += a[k,m]^T @ b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(p, c_row): (usize, &mut [T])| {
        for i in 0..k {
            let av = a[i * m + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four independent accumulators let the compiler vectorise the loop while
    // keeping the summation order fixed.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Visits every element of a broadcast binary operation as
/// `(out_index, a_index, b_index)`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = out[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * inner;
        for j in 0..inner {
            f(base + j, oa + j * ia, ob + j * ib);
        }
        for d in (0..nd - 1).rev() {
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

/// Sums `grad` (shaped `out`) down to `shape` by reducing over broadcast dims.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    let numel: usize = shape.iter().product();
    if numel == grad.len() {
        return grad.to_vec();
    }
    let strides = super::broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![T::zero(); numel];
    for_each_broadcast(out, &strides, &zeros, |o, i, _| acc[i] += grad[o]);
    acc
}

/// Copies `src` (shaped `shape`) into the row-major layout of `shape[axes]`.
pub(crate) fn permute_copy<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); src.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, s, _| out[o] = src[s]);
    out
}

/// `out[b, y, x, :] = src[b, (y + shift) mod h, (x + shift) mod w, :]`
pub(crate) fn roll2d<T: Scalar>(src: &[T], shape: &[usize], shift: isize) -> Vec<T> {
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); src.len()];
    let sy = shift.rem_euclid(h as isize) as usize;
    let sx = shift.rem_euclid(w as isize) as usize;
    for bi in 0..b {
        for y in 0..h {
            let ys = (y + sy) % h;
            for x in 0..w {
                let xs = (x + sx) % w;
                let o = ((bi * h + y) * w + x) * c;
                let s = ((bi * h + ys) * w + xs) * c;
                out[o..o + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    out
}

/// `[B,C,H,W] -> [B,C*r*r,H/r,W/r]` with `out[c*r*r + i*r + j, y, x] = in[c, y*r+i, x*r+j]`.
pub(crate) fn pixel_unshuffle<T: Scalar>(src: &[T], shape: &[usize], r: usize) -> Vec<T> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let oc = (ci * r + i) * r + j;
                    for y in 0..oh {
                        let orow = ((bi * c * r * r + oc) * oh + y) * ow;
                        let srow = ((bi * c + ci) * h + y * r + i) * w;
                        for x in 0..ow {
                            out[orow + x] = src[srow + x * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`pixel_unshuffle`]; `shape` is the shuffled-input shape `[B,C*r*r,H,W]`.
pub(crate) fn pixel_shuffle<T: Scalar>(src: &[T], shape: &[usize], r: usize) -> Vec<T> {
    let (b, cr, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let sc = (ci * r + i) * r + j;
                    for y in 0..h {
                        let srow = ((bi * cr + sc) * h + y) * w;
                        let orow = ((bi * c + ci) * oh + y * r + i) * ow;
                        for x in 0..w {
                            out[orow + x * r + j] = src[srow + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `[Cin,H,W]` into `[Cin*kh*kw, OH*OW]` with zero padding.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * g.col_cols()..(row + 1) * g.col_cols()];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * g.col_cols()..(row + 1) * g.col_cols()];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = ox as isize + kx as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}
