//! Slice-level kernels behind the tape primitives. Layout is always
//! row-major; convolution inputs are `N x C x T x V`.

use super::Scalar;

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Eight independent accumulators so the reduction vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y[m,n] = sum_k a[m,k] b[k,n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m * n];
    for i in 0..m {
        let yr = &mut y[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(yr, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    y
}

/// `a^T` for an `m x n` matrix.
pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// `y[n,o] = b[o] + sum_i x[n,i] w[o,i]`
pub fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * out];
    for r in 0..n {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            y[r * out + o] = b[o] + dot(xr, &w[o * inp..(o + 1) * inp]);
        }
    }
    y
}

pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    n: usize,
    inp: usize,
    out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); n * inp];
    let mut gw = vec![T::zero(); out * inp];
    let mut gb = vec![T::zero(); out];
    for r in 0..n {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = gy[r * out + o];
            gb[o] += g;
            axpy(
                &mut gx[r * inp..(r + 1) * inp],
                g,
                &w[o * inp..(o + 1) * inp],
            );
            axpy(&mut gw[o * inp..(o + 1) * inp], g, xr);
        }
    }
    (gx, gw, gb)
}

pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub v: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    /// Output rows `t'` for which input row `t' * stride + k - pad` is in range.
    #[inline]
    fn valid_range(&self, kk: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // t' * s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // t' * s + off <= t_in - 1
        let hi_num = self.t_in as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(self.t_out as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// Temporal convolution along T, independently per node. `w` is
/// `c_out x c_in x k`; zero padding.
pub fn temporal_conv<T: Scalar>(x: &[T], w: &[T], b: &[T], d: &ConvDims) -> Vec<T> {
    let v = d.v;
    let in_plane = d.t_in * v;
    let out_plane = d.t_out * v;
    let mut y = vec![T::zero(); d.n * d.c_out * out_plane];
    for n in 0..d.n {
        for o in 0..d.c_out {
            let yp = &mut y[(n * d.c_out + o) * out_plane..(n * d.c_out + o + 1) * out_plane];
            yp.iter_mut().for_each(|e| *e = b[o]);
            for c in 0..d.c_in {
                let xp = &x[(n * d.c_in + c) * in_plane..(n * d.c_in + c + 1) * in_plane];
                for kk in 0..d.k {
                    let wk = w[(o * d.c_in + c) * d.k + kk];
                    if wk == T::zero() {
                        continue;
                    }
                    let (lo, hi) = d.valid_range(kk);
                    if lo >= hi {
                        continue;
                    }
                    if d.stride == 1 {
                        let t0 = lo + kk - d.pad;
                        axpy(&mut yp[lo * v..hi * v], wk, &xp[t0 * v..(t0 + hi - lo) * v]);
                    } else {
                        for to in lo..hi {
                            let ti = to * d.stride + kk - d.pad;
                            axpy(&mut yp[to * v..(to + 1) * v], wk, &xp[ti * v..(ti + 1) * v]);
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn temporal_conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: &ConvDims,
    need_gx: bool,
    need_gw: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let v = d.v;
    let in_plane = d.t_in * v;
    let out_plane = d.t_out * v;
    let mut gx = if need_gx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut gw = vec![T::zero(); if need_gw { w.len() } else { 0 }];
    let mut gb = vec![T::zero(); d.c_out];
    for n in 0..d.n {
        for o in 0..d.c_out {
            let gp = &gy[(n * d.c_out + o) * out_plane..(n * d.c_out + o + 1) * out_plane];
            gb[o] += gp.iter().copied().sum::<T>();
            for c in 0..d.c_in {
                let base = (n * d.c_in + c) * in_plane;
                for kk in 0..d.k {
                    let (lo, hi) = d.valid_range(kk);
                    if lo >= hi {
                        continue;
                    }
                    let widx = (o * d.c_in + c) * d.k + kk;
                    if d.stride == 1 {
                        let t0 = lo + kk - d.pad;
                        let len = (hi - lo) * v;
                        let gsl = &gp[lo * v..hi * v];
                        if need_gw {
                            gw[widx] += dot(gsl, &x[base + t0 * v..base + t0 * v + len]);
                        }
                        if need_gx {
                            axpy(&mut gx[base + t0 * v..base + t0 * v + len], w[widx], gsl);
                        }
                    } else {
                        for to in lo..hi {
                            let ti = to * d.stride + kk - d.pad;
                            let gsl = &gp[to * v..(to + 1) * v];
                            let xs = base + ti * v;
                            if need_gw {
                                gw[widx] += dot(gsl, &x[xs..xs + v]);
                            }
                            if need_gx {
                                axpy(&mut gx[xs..xs + v], w[widx], gsl);
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Channel mixing at every (t, v): `w` is `c_out x c_in`.
pub fn pointwise<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    c_in: usize,
    c_out: usize,
    plane: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); n * c_out * plane];
    for s in 0..n {
        for o in 0..c_out {
            let yp = &mut y[(s * c_out + o) * plane..(s * c_out + o + 1) * plane];
            yp.iter_mut().for_each(|e| *e = b[o]);
            for c in 0..c_in {
                let wc = w[o * c_in + c];
                axpy(
                    yp,
                    wc,
                    &x[(s * c_in + c) * plane..(s * c_in + c + 1) * plane],
                );
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn pointwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    n: usize,
    c_in: usize,
    c_out: usize,
    plane: usize,
    need_gx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = if need_gx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); c_out];
    for s in 0..n {
        for o in 0..c_out {
            let gp = &gy[(s * c_out + o) * plane..(s * c_out + o + 1) * plane];
            gb[o] += gp.iter().copied().sum::<T>();
            for c in 0..c_in {
                let xs = (s * c_in + c) * plane;
                gw[o * c_in + c] += dot(gp, &x[xs..xs + plane]);
                if need_gx {
                    axpy(&mut gx[xs..xs + plane], w[o * c_in + c], gp);
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Nonzero entries `(u, v, a_uv)` of a `V x V` matrix.
pub fn sparse_entries<T: Scalar>(a: &[T], v: usize) -> Vec<(usize, usize, T)> {
    let mut out = Vec::new();
    for u in 0..v {
        for w in 0..v {
            let val = a[u * v + w];
            if val != T::zero() {
                out.push((u, w, val));
            }
        }
    }
    out
}

/// `y[.., v] = sum_u x[.., u] a[u, v]` over every row of length `v`.
pub fn graph_mul<T: Scalar>(x: &[T], entries: &[(usize, usize, T)], v: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(v).zip(y.chunks_exact_mut(v)) {
        for &(u, w, a) in entries {
            yr[w] += a * xr[u];
        }
    }
    y
}

pub fn graph_mul_backward<T: Scalar>(
    x: &[T],
    entries: &[(usize, usize, T)],
    gy: &[T],
    v: usize,
    need_gx: bool,
    need_ga: bool,
) -> (Vec<T>, Vec<T>) {
    let mut gx = if need_gx {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut ga = if need_ga {
        vec![T::zero(); v * v]
    } else {
        Vec::new()
    };
    if need_gx {
        for (gxr, gyr) in gx.chunks_exact_mut(v).zip(gy.chunks_exact(v)) {
            for &(u, w, a) in entries {
                gxr[u] += a * gyr[w];
            }
        }
    }
    if need_ga {
        for (xr, gyr) in x.chunks_exact(v).zip(gy.chunks_exact(v)) {
            for u in 0..v {
                axpy(&mut ga[u * v..(u + 1) * v], xr[u], gyr);
            }
        }
    }
    (gx, ga)
}
