//! Slice-level forward and adjoint kernels shared by the eager functions in
//! `ops` and the recorded operations in `graph`.

use alloc::vec;
use alloc::vec::Vec;

use super::{gemm, Layout, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<R: Real>(x: &[R], g: &ConvGeom, cols: &mut [R]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = R::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { R::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<R: Real>(cols: &[R], g: &ConvGeom, dx: &mut [R]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<R: Real>(x: &[R], w: &[R], b: &[R], g: &ConvGeom) -> Vec<R> {
    let hw_out = g.ho * g.wo;
    let k = g.k();
    let mut out = vec![R::zero(); g.n * g.cout * hw_out];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![R::zero(); k * hw_out] };
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let on = &mut out[n * g.cout * hw_out..(n + 1) * g.cout * hw_out];
        for (co, chunk) in on.chunks_mut(hw_out).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
        let src: &[R] = if g.pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        gemm(
            R::one(),
            w,
            Layout::row_major(g.cout, k),
            src,
            Layout::row_major(k, hw_out),
            R::one(),
            on,
            Layout::row_major(g.cout, hw_out),
        );
    }
    out
}

/// Accumulates the conv adjoints into `dx` (if given), `dw` and `db`.
pub fn conv2d_backward<R: Real>(
    x: &[R],
    w: &[R],
    dy: &[R],
    g: &ConvGeom,
    mut dx: Option<&mut [R]>,
    dw: Option<&mut [R]>,
    db: Option<&mut [R]>,
) {
    let hw_out = g.ho * g.wo;
    let k = g.k();
    let in_sz = g.cin * g.h * g.w;
    let mut cols = vec![R::zero(); k * hw_out];
    let mut dcols = vec![R::zero(); k * hw_out];
    let mut dw = dw;
    if let Some(db) = db {
        for n in 0..g.n {
            let dyn_ = &dy[n * g.cout * hw_out..(n + 1) * g.cout * hw_out];
            for (co, chunk) in dyn_.chunks(hw_out).enumerate() {
                let mut s = R::zero();
                for &v in chunk {
                    s += v;
                }
                db[co] += s;
            }
        }
    }
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let dyn_ = &dy[n * g.cout * hw_out..(n + 1) * g.cout * hw_out];
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[R] = if g.pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(
                R::one(),
                dyn_,
                Layout::row_major(g.cout, hw_out),
                src,
                Layout::row_major(k, hw_out).t(),
                R::one(),
                dw,
                Layout::row_major(g.cout, k),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.pointwise() {
                gemm(
                    R::one(),
                    w,
                    Layout::row_major(g.cout, k).t(),
                    dyn_,
                    Layout::row_major(g.cout, hw_out),
                    R::one(),
                    dxn,
                    Layout::row_major(k, hw_out),
                );
            } else {
                gemm(
                    R::one(),
                    w,
                    Layout::row_major(g.cout, k).t(),
                    dyn_,
                    Layout::row_major(g.cout, hw_out),
                    R::zero(),
                    &mut dcols,
                    Layout::row_major(k, hw_out),
                );
                col2im_add(&dcols, g, dxn);
            }
        }
    }
}

/// Softmax over the channel axis of `[n, c, hw]` data with per-pixel max subtraction.
pub fn softmax_forward<R: Real>(x: &[R], n: usize, c: usize, hw: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut m = x[base + p];
            for k in 1..c {
                m = m.max(x[base + k * hw + p]);
            }
            let mut s = R::zero();
            for k in 0..c {
                let e = (x[base + k * hw + p] - m).exp();
                out[base + k * hw + p] = e;
                s += e;
            }
            let inv = R::one() / s;
            for k in 0..c {
                out[base + k * hw + p] *= inv;
            }
        }
    }
    out
}

pub fn softmax_backward<R: Real>(y: &[R], dy: &[R], dx: &mut [R], n: usize, c: usize, hw: usize) {
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut dot = R::zero();
            for k in 0..c {
                let i = base + k * hw + p;
                dot += y[i] * dy[i];
            }
            for k in 0..c {
                let i = base + k * hw + p;
                dx[i] += y[i] * (dy[i] - dot);
            }
        }
    }
}

/// Source taps for one output axis of a half-pixel bilinear resize.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i0 == i1 { 0.0 } else { src - i0 as f64 });
        }
        AxisTaps { lo, hi, frac }
    }
}

pub struct ResizePlan {
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    ys: AxisTaps,
    xs: AxisTaps,
}

impl ResizePlan {
    pub fn new(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        ResizePlan { h, w, oh, ow, ys: AxisTaps::new(h, oh), xs: AxisTaps::new(w, ow) }
    }

    pub fn identity(&self) -> bool {
        self.h == self.oh && self.w == self.ow
    }

    /// Resizes `planes` consecutive `h×w` planes.
    pub fn forward<R: Real>(&self, x: &[R], planes: usize) -> Vec<R> {
        if self.identity() {
            return x.to_vec();
        }
        let mut out = vec![R::zero(); planes * self.oh * self.ow];
        for p in 0..planes {
            let src = &x[p * self.h * self.w..(p + 1) * self.h * self.w];
            let dst = &mut out[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            for oy in 0..self.oh {
                let (y0, y1) = (self.ys.lo[oy], self.ys.hi[oy]);
                let fy = R::from_f64(self.ys.frac[oy]);
                for ox in 0..self.ow {
                    let (x0, x1) = (self.xs.lo[ox], self.xs.hi[ox]);
                    let fx = R::from_f64(self.xs.frac[ox]);
                    let top = src[y0 * self.w + x0] * (R::one() - fx) + src[y0 * self.w + x1] * fx;
                    let bot = src[y1 * self.w + x0] * (R::one() - fx) + src[y1 * self.w + x1] * fx;
                    dst[oy * self.ow + ox] = top * (R::one() - fy) + bot * fy;
                }
            }
        }
        out
    }

    pub fn backward<R: Real>(&self, dy: &[R], dx: &mut [R], planes: usize) {
        if self.identity() {
            for (a, &b) in dx.iter_mut().zip(dy) {
                *a += b;
            }
            return;
        }
        for p in 0..planes {
            let src = &dy[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            let dst = &mut dx[p * self.h * self.w..(p + 1) * self.h * self.w];
            for oy in 0..self.oh {
                let (y0, y1) = (self.ys.lo[oy], self.ys.hi[oy]);
                let fy = R::from_f64(self.ys.frac[oy]);
                for ox in 0..self.ow {
                    let (x0, x1) = (self.xs.lo[ox], self.xs.hi[ox]);
                    let fx = R::from_f64(self.xs.frac[ox]);
                    let g = src[oy * self.ow + ox];
                    let gt = g * (R::one() - fy);
                    let gb = g * fy;
                    dst[y0 * self.w + x0] += gt * (R::one() - fx);
                    dst[y0 * self.w + x1] += gt * fx;
                    dst[y1 * self.w + x0] += gb * (R::one() - fx);
                    dst[y1 * self.w + x1] += gb * fx;
                }
            }
        }
    }
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean of `-ln max(p[y], floor)` over non-ignored pixels. Returns the loss and
/// the number of pixels that contributed.
pub fn cross_entropy_forward<R: Real>(
    p: &[R],
    labels: &[u8],
    n: usize,
    c: usize,
    hw: usize,
    ignore: Option<u8>,
) -> (f64, usize) {
    let mut total = 0.0f64;
    let mut valid = 0usize;
    for b in 0..n {
        for q in 0..hw {
            let y = labels[b * hw + q];
            if Some(y) == ignore {
                continue;
            }
            let v = p[(b * c + y as usize) * hw + q].as_f64().max(PROB_FLOOR);
            total -= libm::log(v);
            valid += 1;
        }
    }
    if valid == 0 {
        (0.0, 0)
    } else {
        (total / valid as f64, valid)
    }
}

pub fn cross_entropy_backward<R: Real>(
    p: &[R],
    labels: &[u8],
    upstream: R,
    dp: &mut [R],
    n: usize,
    c: usize,
    hw: usize,
    ignore: Option<u8>,
    valid: usize,
) {
    if valid == 0 {
        return;
    }
    let scale = upstream / R::from_f64(valid as f64);
    let floor = R::from_f64(PROB_FLOOR);
    for b in 0..n {
        for q in 0..hw {
            let y = labels[b * hw + q];
            if Some(y) == ignore {
                continue;
            }
            let i = (b * c + y as usize) * hw + q;
            if p[i] >= floor {
                dp[i] -= scale / p[i];
            }
        }
    }
}
