//! Slice-level forward/backward kernels shared by the tape.

use crate::real::{gemm, gemm_strided, MatRef};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Upper bound on scratch-column elements per band.
const BAND_ELEMS: usize = 1 << 15;

/// Valid output columns `[lo, hi)` for horizontal kernel offset `kx`.
fn col_range(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(w);
    (lo, hi.max(lo))
}

/// Unfold output rows `y0..y1` of one sample `[cin, h, w]` into
/// `[cin*k*k, (y1-y0)*w]` with zero padding.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], y0: usize, y1: usize, cols: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let hw = g.plane();
    let bw = (y1 - y0) * w;
    for ci in 0..g.cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * bw..][..bw];
                let (lo, hi) = col_range(w, kx, pad);
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - pad as isize;
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    if sy < 0 || sy >= h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[lo..hi].copy_from_slice(&srow[lo + kx - pad..hi + kx - pad]);
                    dst[hi..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add band columns back into `[cin, h, w]`.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], y0: usize, y1: usize, dx: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let hw = g.plane();
    let bw = (y1 - y0) * w;
    for ci in 0..g.cin {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * bw..][..bw];
                let (lo, hi) = col_range(w, kx, pad);
                if lo >= hi {
                    continue;
                }
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let r = (y - y0) * w;
                    let drow = &mut dst[sy as usize * w + lo + kx - pad..][..hi - lo];
                    for (d, &v) in drow.iter_mut().zip(&row[r + lo..r + hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Row bands `[y0, y1)` sized so one band of columns fits [`BAND_ELEMS`].
fn bands(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let rows = (BAND_ELEMS / (g.patch() * g.w).max(1)).clamp(1, g.h.max(1));
    let h = g.h;
    (0..h).step_by(rows).map(move |y0| (y0, (y0 + rows).min(h)))
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let hw = g.plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let mut cols = Vec::new();
    let wmat = MatRef::row_major(weight, g.cout, patch);
    for s in 0..g.n {
        let xs = &x[s * g.cin * hw..(s + 1) * g.cin * hw];
        let os = &mut out[s * g.cout * hw..(s + 1) * g.cout * hw];
        if g.k == 1 {
            gemm(wmat, MatRef::row_major(xs, patch, hw), os, false);
        } else {
            for (y0, y1) in bands(g) {
                let bw = (y1 - y0) * g.w;
                cols.resize(patch * bw, T::zero());
                im2col(g, xs, y0, y1, &mut cols);
                gemm_strided(wmat, MatRef::row_major(&cols, patch, bw), &mut os[y0 * g.w..], hw, false);
            }
        }
        for (co, plane) in os.chunks_exact_mut(hw).enumerate() {
            let b = bias[co];
            plane.iter_mut().for_each(|v| *v = *v + b);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let hw = g.plane();
    let patch = g.patch();
    let mut dx = want.0.then(|| vec![T::zero(); g.n * g.cin * hw]);
    let mut dw = want.1.then(|| vec![T::zero(); g.cout * patch]);
    let mut db = want.2.then(|| vec![T::zero(); g.cout]);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let wmat = MatRef::row_major(weight, g.cout, patch);
    for s in 0..g.n {
        let xs = &x[s * g.cin * hw..(s + 1) * g.cin * hw];
        let dys = &dy[s * g.cout * hw..(s + 1) * g.cout * hw];
        if g.k == 1 {
            let dymat = MatRef::row_major(dys, g.cout, hw);
            if let Some(dw) = dw.as_mut() {
                gemm(dymat, MatRef::row_major(xs, patch, hw).t(), dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(wmat.t(), dymat, &mut dx[s * g.cin * hw..(s + 1) * g.cin * hw], true);
            }
        } else {
            for (y0, y1) in bands(g) {
                let bw = (y1 - y0) * g.w;
                let dyband = MatRef { data: &dys[y0 * g.w..], rows: g.cout, cols: bw, rs: hw, cs: 1 };
                if let Some(dw) = dw.as_mut() {
                    cols.resize(patch * bw, T::zero());
                    im2col(g, xs, y0, y1, &mut cols);
                    gemm(dyband, MatRef::row_major(&cols, patch, bw).t(), dw, true);
                }
                if let Some(dx) = dx.as_mut() {
                    dcols.resize(patch * bw, T::zero());
                    gemm(wmat.t(), dyband, &mut dcols, false);
                    col2im(g, &dcols, y0, y1, &mut dx[s * g.cin * hw..(s + 1) * g.cin * hw]);
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, plane) in dys.chunks_exact(hw).enumerate() {
                db[co] = db[co] + plane.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 stride-2 max pooling over `[planes, h, w]`; returns values and the
/// flat input index of each maximum.
pub(crate) fn max_pool2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                dst[y * ow + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let d = &mut dst[(y / 2) * w + xo / 2];
                *d = *d + src[y * ow + xo];
            }
        }
    }
    dx
}

/// Softmax over axis 1 of a tensor viewed as `[outer, classes, inner]`.
pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, classes: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * classes * inner;
        for i in 0..inner {
            let at = |c: usize| base + c * inner + i;
            let mut m = T::neg_infinity();
            for c in 0..classes {
                m = m.max(x[at(c)]);
            }
            let mut total = T::zero();
            for c in 0..classes {
                let e = (x[at(c)] - m).exp();
                out[at(c)] = e;
                total = total + e;
            }
            for c in 0..classes {
                out[at(c)] = out[at(c)] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], dy: &[T], outer: usize, classes: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        let base = o * classes * inner;
        for i in 0..inner {
            let at = |c: usize| base + c * inner + i;
            let mut dot = T::zero();
            for c in 0..classes {
                dot = dot + y[at(c)] * dy[at(c)];
            }
            for c in 0..classes {
                dx[at(c)] = y[at(c)] * (dy[at(c)] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used to pin the im2col path.
    fn conv_naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let pad = (g.k / 2) as isize;
        let mut out = vec![0.0; g.n * g.cout * g.h * g.w];
        for s in 0..g.n {
            for co in 0..g.cout {
                for y in 0..g.h {
                    for xo in 0..g.w {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xo as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * g.cin + ci) * g.k + ky) * g.k + kx]
                                        * x[((s * g.cin + ci) * g.h + sy as usize) * g.w + sx as usize];
                                }
                            }
                        }
                        out[((s * g.cout + co) * g.h + y) * g.w + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let mut rng = crate::Rng::new(3);
        for k in [1, 3, 5] {
            let g = ConvGeom { n: 2, cin: 3, cout: 4, h: 5, w: 6, k };
            let x: Vec<f64> = (0..g.n * g.cin * g.h * g.w).map(|_| rng.normal()).collect();
            let w: Vec<f64> = (0..g.cout * g.cin * k * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..g.cout).map(|_| rng.normal()).collect();
            let fast = conv2d_forward(&g, &x, &w, &b);
            let slow = conv_naive(&g, &x, &w, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn banded_conv_matches_naive_and_its_adjoint() {
        let mut rng = crate::Rng::new(5);
        let g = ConvGeom { n: 2, cin: 64, cout: 5, h: 12, w: 16, k: 3 };
        assert!(bands(&g).count() > 2);
        let x: Vec<f64> = (0..g.n * g.cin * g.h * g.w).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..g.cout * g.patch()).map(|_| rng.normal()).collect();
        let zero = vec![0.0; g.cout];
        let y = conv2d_forward(&g, &x, &w, &zero);
        for (a, e) in y.iter().zip(&conv_naive(&g, &x, &w, &zero)) {
            assert!((a - e).abs() < 1e-10);
        }
        let dy: Vec<f64> = (0..y.len()).map(|_| rng.normal()).collect();
        let grads = conv2d_backward(&g, &x, &w, &dy, (true, true, false));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let forward = dot(&y, &dy);
        assert!((dot(&x, &grads.dx.unwrap()) - forward).abs() < 1e-9 * forward.abs().max(1.0));
        assert!((dot(&w, &grads.dw.unwrap()) - forward).abs() < 1e-9 * forward.abs().max(1.0));
    }

    #[test]
    fn pool_picks_window_maximum() {
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, -1.0];
        let (v, idx) = max_pool2_forward(&x, 1, 2, 4);
        assert_eq!(v, vec![5.0, 9.0]);
        assert_eq!(idx, vec![1, 6]);
    }
}
