//! Forward and vector-Jacobian kernels over flat NCHW buffers.
//!
//! Every reduction walks its operands in a fixed order, so results are
//! bitwise reproducible for identical inputs.

use crate::tensor::{Real, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: Shape,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.input.h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (self.input.w + 2 * self.pad - self.k) / self.stride + 1;
        (oh, ow)
    }

    pub fn output(&self) -> Shape {
        let (h, w) = self.out_hw();
        Shape::new(self.input.n, self.c_out, h, w)
    }

    fn patch(&self) -> usize {
        self.input.c * self.k * self.k
    }
}

/// Unrolls one batch element into a (C·k·k) × (H_out·W_out) matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w) = (g.input.h as isize, g.input.w as isize);
    let p = oh * ow;
    let mut row = 0;
    for c in 0..g.input.c {
        let plane = &x[c * g.input.plane()..(c + 1) * g.input.plane()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.input.w..(iy as usize + 1) * g.input.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w) = (g.input.h as isize, g.input.w as isize);
    let p = oh * ow;
    let mut row = 0;
    for c in 0..g.input.c {
        let plane = &mut dx[c * g.input.plane()..(c + 1) * g.input.plane()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.input.w..(iy as usize + 1) * g.input.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * *xv;
    }
}

/// Dot product with eight fixed accumulation lanes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += xa[i] * xb[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let kk = g.patch();
    let per_in = g.input.c * g.input.plane();
    let mut out = vec![T::zero(); g.input.n * g.c_out * p];
    let mut cols = vec![T::zero(); kk * p];
    for n in 0..g.input.n {
        im2col(g, &x[n * per_in..(n + 1) * per_in], &mut cols);
        let dst = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        for co in 0..g.c_out {
            let row = &mut dst[co * p..(co + 1) * p];
            if let Some(b) = b {
                row.fill(b[co]);
            }
            let wrow = &w[co * kk..(co + 1) * kk];
            for (r, &wv) in wrow.iter().enumerate() {
                axpy(wv, &cols[r * p..(r + 1) * p], row);
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for `dout`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let kk = g.patch();
    let per_in = g.input.c * g.input.plane();
    let per_out = g.c_out * p;

    if let Some(db) = db {
        for n in 0..g.input.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let row = &dout[n * per_out + co * p..n * per_out + (co + 1) * p];
                *acc += row.iter().copied().sum::<T>();
            }
        }
    }

    let mut cols = vec![T::zero(); kk * p];
    if let Some(dw) = dw {
        for n in 0..g.input.n {
            im2col(g, &x[n * per_in..(n + 1) * per_in], &mut cols);
            let d = &dout[n * per_out..(n + 1) * per_out];
            for co in 0..g.c_out {
                let drow = &d[co * p..(co + 1) * p];
                for r in 0..kk {
                    dw[co * kk + r] += dot(drow, &cols[r * p..(r + 1) * p]);
                }
            }
        }
    }

    if let Some(dx) = dx {
        for n in 0..g.input.n {
            cols.fill(T::zero());
            let d = &dout[n * per_out..(n + 1) * per_out];
            for co in 0..g.c_out {
                let drow = &d[co * p..(co + 1) * p];
                for r in 0..kk {
                    axpy(w[co * kk + r], drow, &mut cols[r * p..(r + 1) * p]);
                }
            }
            col2im(g, &cols, &mut dx[n * per_in..(n + 1) * per_in]);
        }
    }
}

pub fn upsample_nearest_forward<T: Real>(s: Shape, x: &[T], f: usize) -> Vec<T> {
    let (oh, ow) = (s.h * f, s.w * f);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.chunks_exact(s.plane()) {
        for oy in 0..oh {
            let row = &plane[(oy / f) * s.w..(oy / f + 1) * s.w];
            for ox in 0..ow {
                out.push(row[ox / f]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Real>(s: Shape, dout: &[T], f: usize, dx: &mut [T]) {
    let (oh, ow) = (s.h * f, s.w * f);
    for (dplane, xplane) in dout.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(s.plane())) {
        for oy in 0..oh {
            for ox in 0..ow {
                xplane[(oy / f) * s.w + ox / f] += dplane[oy * ow + ox];
            }
        }
    }
}

/// 2×2 box average with stride 2. `s` is the input shape (even dims).
pub fn area_down2_forward<T: Real>(s: Shape, x: &[T]) -> Vec<T> {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.chunks_exact(s.plane()) {
        for oy in 0..oh {
            let r0 = &plane[2 * oy * s.w..(2 * oy + 1) * s.w];
            let r1 = &plane[(2 * oy + 1) * s.w..(2 * oy + 2) * s.w];
            for ox in 0..ow {
                let sum = (r0[2 * ox] + r0[2 * ox + 1]) + (r1[2 * ox] + r1[2 * ox + 1]);
                out.push(sum * quarter);
            }
        }
    }
    out
}

pub fn area_down2_backward<T: Real>(s: Shape, dout: &[T], dx: &mut [T]) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = T::of(0.25);
    for (dplane, xplane) in dout.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(s.plane())) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dplane[oy * ow + ox] * quarter;
                xplane[2 * oy * s.w + 2 * ox] += g;
                xplane[2 * oy * s.w + 2 * ox + 1] += g;
                xplane[(2 * oy + 1) * s.w + 2 * ox] += g;
                xplane[(2 * oy + 1) * s.w + 2 * ox + 1] += g;
            }
        }
    }
}

/// Stride-1, unpadded 3×3 mean. `s` is the input shape.
pub fn avg_pool3_forward<T: Real>(s: Shape, x: &[T]) -> Vec<T> {
    let (oh, ow) = (s.h - 2, s.w - 2);
    let ninth = T::one() / T::of(9.0);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.chunks_exact(s.plane()) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..3 {
                    let row = &plane[(oy + dy) * s.w + ox..(oy + dy) * s.w + ox + 3];
                    acc += row[0] + row[1] + row[2];
                }
                out.push(acc * ninth);
            }
        }
    }
    out
}

pub fn avg_pool3_backward<T: Real>(s: Shape, dout: &[T], dx: &mut [T]) {
    let (oh, ow) = (s.h - 2, s.w - 2);
    let ninth = T::one() / T::of(9.0);
    for (dplane, xplane) in dout.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(s.plane())) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dplane[oy * ow + ox] * ninth;
                for dy in 0..3 {
                    let base = (oy + dy) * s.w + ox;
                    xplane[base] += g;
                    xplane[base + 1] += g;
                    xplane[base + 2] += g;
                }
            }
        }
    }
}

/// Horizontal sample position after clamping, left tap index and blend weight.
/// `clamped` is true when the raw coordinate fell outside `[0, w-1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowTap<T> {
    pub x0: usize,
    pub frac: T,
    pub clamped: bool,
}

#[inline]
pub fn row_tap<T: Real>(u: T, w: usize) -> RowTap<T> {
    let hi = T::of((w - 1) as f64);
    let clamped = u < T::zero() || u > hi;
    let uc = u.max(T::zero()).min(hi);
    if w == 1 {
        return RowTap {
            x0: 0,
            frac: T::zero(),
            clamped,
        };
    }
    let x0 = uc.floor().to_usize().unwrap_or(0).min(w - 2);
    RowTap {
        x0,
        frac: uc - T::of(x0 as f64),
        clamped,
    }
}

/// Samples each row of `src` at `x + sign·disp(x)`, linearly interpolating
/// between the two neighbouring columns. `disp` has one channel shared by all
/// source channels.
pub fn sample_rows_forward<T: Real>(s: Shape, src: &[T], disp: &[T], sign: T) -> Vec<T> {
    let mut out = vec![T::zero(); s.numel()];
    let plane = s.plane();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let d = disp[(n * s.h + y) * s.w + x];
                let tap = row_tap(T::of(x as f64) + sign * d, s.w);
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane + y * s.w;
                    let v = if s.w == 1 {
                        src[base]
                    } else {
                        let a = src[base + tap.x0];
                        let b = src[base + tap.x0 + 1];
                        a + tap.frac * (b - a)
                    };
                    out[base + x] = v;
                }
            }
        }
    }
    out
}

pub fn sample_rows_backward<T: Real>(
    s: Shape,
    src: &[T],
    disp: &[T],
    sign: T,
    dout: &[T],
    mut dsrc: Option<&mut [T]>,
    mut ddisp: Option<&mut [T]>,
) {
    let plane = s.plane();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let di = (n * s.h + y) * s.w + x;
                let tap = row_tap(T::of(x as f64) + sign * disp[di], s.w);
                let mut gd = T::zero();
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane + y * s.w;
                    let g = dout[base + x];
                    if s.w == 1 {
                        if let Some(ds) = dsrc.as_deref_mut() {
                            ds[base] += g;
                        }
                        continue;
                    }
                    if let Some(ds) = dsrc.as_deref_mut() {
                        ds[base + tap.x0] += g * (T::one() - tap.frac);
                        ds[base + tap.x0 + 1] += g * tap.frac;
                    }
                    gd += g * (src[base + tap.x0 + 1] - src[base + tap.x0]);
                }
                if let Some(dd) = ddisp.as_deref_mut() {
                    if !tap.clamped && s.w > 1 {
                        dd[di] += sign * gd;
                    }
                }
            }
        }
    }
}
