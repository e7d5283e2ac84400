//! Forward kernels and their adjoints.
//!
//! Every function here is pure. Kernels that run in parallel split work by
//! output plane so each output element is reduced in a fixed order, which
//! keeps results bit-identical across thread counts.

use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BETA_FLOOR: f64 = 1e-4;

fn check_bias<T: Scalar>(op: &'static str, b: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    match b {
        Some(b) if b.numel() != cout => Err(Error::shape(
            op,
            format!("bias has {} entries, expected {cout}", b.numel()),
        )),
        _ => Ok(()),
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], k: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + k * s;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `dst[h, w] += k * src[h + dy, w + dx]` wherever the source index is in bounds.
fn shifted_axpy<T: Scalar>(dst: &mut [T], src: &[T], hgt: usize, wid: usize, dy: isize, dx: isize, k: T) {
    let w0 = (-dx).max(0) as usize;
    let w1 = (wid as isize - dx).min(wid as isize).max(0) as usize;
    if w0 >= w1 {
        return;
    }
    for h in 0..hgt {
        let hs = h as isize + dy;
        if hs < 0 || hs >= hgt as isize {
            continue;
        }
        let hs = hs as usize;
        let drow = &mut dst[h * wid + w0..h * wid + w1];
        let s0 = (hs * wid) as isize + w0 as isize + dx;
        let srow = &src[s0 as usize..s0 as usize + (w1 - w0)];
        axpy(drow, srow, k);
    }
}

/// `Σ a[h, w] * b[h + dy, w + dx]` over in-bounds positions.
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], hgt: usize, wid: usize, dy: isize, dx: isize) -> T {
    let w0 = (-dx).max(0) as usize;
    let w1 = (wid as isize - dx).min(wid as isize).max(0) as usize;
    let mut acc = T::zero();
    if w0 >= w1 {
        return acc;
    }
    for h in 0..hgt {
        let hs = h as isize + dy;
        if hs < 0 || hs >= hgt as isize {
            continue;
        }
        let hs = hs as usize;
        let arow = &a[h * wid + w0..h * wid + w1];
        let s0 = ((hs * wid) as isize + w0 as isize + dx) as usize;
        acc = acc + dot(arow, &b[s0..s0 + (w1 - w0)]);
    }
    acc
}

#[inline]
fn tap_offset(t: usize) -> (isize, isize) {
    ((t / 3) as isize - 1, (t % 3) as isize - 1)
}

// ---------------------------------------------------------------------------
// 1×1 convolution

pub fn conv2d_1x1<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
        return Err(Error::shape(
            "conv2d_1x1",
            format!("weight {ws} cannot consume input {xs}"),
        ));
    }
    check_bias("conv2d_1x1", b, ws.n)?;
    let (cin, cout, p) = (xs.c, ws.n, xs.plane());
    let ys = Shape::new(xs.n, cout, xs.h, xs.w);
    let mut y = Tensor::zeros(ys);
    let xd = x.data();
    let wd = w.data();
    y.data_mut().par_chunks_mut(p).enumerate().for_each(|(k, out)| {
        let (n, o) = (k / cout, k % cout);
        let bias = b.map_or(T::zero(), |b| b.data()[o]);
        out.iter_mut().for_each(|v| *v = bias);
        for i in 0..cin {
            let xp = &xd[(n * cin + i) * p..(n * cin + i + 1) * p];
            axpy(out, xp, wd[o * cin + i]);
        }
    });
    Ok(y)
}

pub(crate) fn conv2d_1x1_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let (cin, cout, p) = (xs.c, w.shape().n, xs.plane());
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();

    let mut dx = Tensor::zeros(xs);
    dx.data_mut().par_chunks_mut(p).enumerate().for_each(|(k, out)| {
        let (n, i) = (k / cin, k % cin);
        for o in 0..cout {
            let gp = &gd[(n * cout + o) * p..(n * cout + o + 1) * p];
            axpy(out, gp, wd[o * cin + i]);
        }
    });

    let mut dw = Tensor::zeros(w.shape());
    dw.data_mut().par_chunks_mut(cin).enumerate().for_each(|(o, row)| {
        for (i, r) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for n in 0..xs.n {
                let gp = &gd[(n * cout + o) * p..(n * cout + o + 1) * p];
                let xp = &xd[(n * cin + i) * p..(n * cin + i + 1) * p];
                acc = acc + dot(gp, xp);
            }
            *r = acc;
        }
    });

    let db = channel_sums(dy);
    (dx, dw, db)
}

/// Per-channel sum over samples and positions, returned as a `1×C×1×1` vector.
fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::vector(s.c));
    for n in 0..s.n {
        for c in 0..s.c {
            let v: T = t.plane(n, c).iter().copied().sum();
            out.data_mut()[c] = out.data()[c] + v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 3×3 depth-wise convolution, zero padding 1

pub fn dwconv2d_3x3<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws != Shape::new(xs.c, 1, 3, 3) {
        return Err(Error::shape(
            "dwconv2d_3x3",
            format!("kernel {ws}, expected {}x1x3x3", xs.c),
        ));
    }
    check_bias("dwconv2d_3x3", b, xs.c)?;
    let (c, p) = (xs.c, xs.plane());
    let mut y = Tensor::zeros(xs);
    let xd = x.data();
    let wd = w.data();
    y.data_mut().par_chunks_mut(p).enumerate().for_each(|(k, out)| {
        let ch = k % c;
        let bias = b.map_or(T::zero(), |b| b.data()[ch]);
        out.iter_mut().for_each(|v| *v = bias);
        let xp = &xd[k * p..(k + 1) * p];
        for t in 0..9 {
            let (dy, dx) = tap_offset(t);
            shifted_axpy(out, xp, xs.h, xs.w, dy, dx, wd[ch * 9 + t]);
        }
    });
    Ok(y)
}

pub(crate) fn dwconv2d_3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let (c, p) = (xs.c, xs.plane());
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();

    let mut dx = Tensor::zeros(xs);
    dx.data_mut().par_chunks_mut(p).enumerate().for_each(|(k, out)| {
        let ch = k % c;
        let gp = &gd[k * p..(k + 1) * p];
        for t in 0..9 {
            let (oy, ox) = tap_offset(t);
            shifted_axpy(out, gp, xs.h, xs.w, -oy, -ox, wd[ch * 9 + t]);
        }
    });

    let mut dw = Tensor::zeros(w.shape());
    dw.data_mut().par_chunks_mut(9).enumerate().for_each(|(ch, taps)| {
        for (t, tap) in taps.iter_mut().enumerate() {
            let (oy, ox) = tap_offset(t);
            let mut acc = T::zero();
            for n in 0..xs.n {
                let k = n * c + ch;
                acc = acc + shifted_dot(&gd[k * p..(k + 1) * p], &xd[k * p..(k + 1) * p], xs.h, xs.w, oy, ox);
            }
            *tap = acc;
        }
    });

    (dx, dw, channel_sums(dy))
}

// ---------------------------------------------------------------------------
// Dense 3×3 convolution, zero padding 1

pub fn conv2d_3x3<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c != xs.c || ws.h != 3 || ws.w != 3 {
        return Err(Error::shape(
            "conv2d_3x3",
            format!("weight {ws} cannot consume input {xs}"),
        ));
    }
    check_bias("conv2d_3x3", b, ws.n)?;
    let (cin, cout, p) = (xs.c, ws.n, xs.plane());
    let mut y = Tensor::zeros(Shape::new(xs.n, cout, xs.h, xs.w));
    let xd = x.data();
    let wd = w.data();
    y.data_mut().par_chunks_mut(p).enumerate().for_each(|(k, out)| {
        let (n, o) = (k / cout, k % cout);
        let bias = b.map_or(T::zero(), |b| b.data()[o]);
        out.iter_mut().for_each(|v| *v = bias);
        for i in 0..cin {
            let xp = &xd[(n * cin + i) * p..(n * cin + i + 1) * p];
            for t in 0..9 {
                let (dy, dx) = tap_offset(t);
                shifted_axpy(out, xp, xs.h, xs.w, dy, dx, wd[(o * cin + i) * 9 + t]);
            }
        }
    });
    Ok(y)
}

pub(crate) fn conv2d_3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let (cin, cout, p) = (xs.c, w.shape().n, xs.plane());
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();

    let mut dx = Tensor::zeros(xs);
    dx.data_mut().par_chunks_mut(p).enumerate().for_each(|(k, out)| {
        let (n, i) = (k / cin, k % cin);
        for o in 0..cout {
            let gp = &gd[(n * cout + o) * p..(n * cout + o + 1) * p];
            for t in 0..9 {
                let (oy, ox) = tap_offset(t);
                shifted_axpy(out, gp, xs.h, xs.w, -oy, -ox, wd[(o * cin + i) * 9 + t]);
            }
        }
    });

    let mut dw = Tensor::zeros(w.shape());
    dw.data_mut().par_chunks_mut(cin * 9).enumerate().for_each(|(o, row)| {
        for i in 0..cin {
            for t in 0..9 {
                let (oy, ox) = tap_offset(t);
                let mut acc = T::zero();
                for n in 0..xs.n {
                    let gp = &gd[(n * cout + o) * p..(n * cout + o + 1) * p];
                    let xp = &xd[(n * cin + i) * p..(n * cin + i + 1) * p];
                    acc = acc + shifted_dot(gp, xp, xs.h, xs.w, oy, ox);
                }
                row[i * 9 + t] = acc;
            }
        }
    });

    (dx, dw, channel_sums(dy))
}

// ---------------------------------------------------------------------------
// 2×2 stride-2 convolution

pub fn downsample<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if !xs.h.is_multiple_of(2) || !xs.w.is_multiple_of(2) {
        return Err(Error::shape(
            "downsample",
            format!("spatial dims of {xs} must be even"),
        ));
    }
    if ws.c != xs.c || ws.h != 2 || ws.w != 2 {
        return Err(Error::shape(
            "downsample",
            format!("weight {ws} cannot consume input {xs}"),
        ));
    }
    let (cin, cout) = (xs.c, ws.n);
    let (ho, wo) = (xs.h / 2, xs.w / 2);
    let mut y = Tensor::zeros(Shape::new(xs.n, cout, ho, wo));
    let wd = w.data();
    y.data_mut().par_chunks_mut(ho * wo).enumerate().for_each(|(k, out)| {
        let (n, o) = (k / cout, k % cout);
        for i in 0..cin {
            let xp = x.plane(n, i);
            let kw = &wd[(o * cin + i) * 4..(o * cin + i + 1) * 4];
            for h in 0..ho {
                let r0 = &xp[2 * h * xs.w..(2 * h + 1) * xs.w];
                let r1 = &xp[(2 * h + 1) * xs.w..(2 * h + 2) * xs.w];
                let orow = &mut out[h * wo..(h + 1) * wo];
                for (wi, o) in orow.iter_mut().enumerate() {
                    *o = *o
                        + kw[0] * r0[2 * wi]
                        + kw[1] * r0[2 * wi + 1]
                        + kw[2] * r1[2 * wi]
                        + kw[3] * r1[2 * wi + 1];
                }
            }
        }
    });
    Ok(y)
}

pub(crate) fn downsample_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let xs = x.shape();
    let (cin, cout) = (xs.c, w.shape().n);
    let (ho, wo) = (xs.h / 2, xs.w / 2);
    let wd = w.data();

    let mut dx = Tensor::zeros(xs);
    dx.data_mut().par_chunks_mut(xs.plane()).enumerate().for_each(|(k, out)| {
        let (n, i) = (k / cin, k % cin);
        for o in 0..cout {
            let gp = dy.plane(n, o);
            let kw = &wd[(o * cin + i) * 4..(o * cin + i + 1) * 4];
            for h in 0..ho {
                for wi in 0..wo {
                    let g = gp[h * wo + wi];
                    let base = 2 * h * xs.w + 2 * wi;
                    out[base] = out[base] + kw[0] * g;
                    out[base + 1] = out[base + 1] + kw[1] * g;
                    out[base + xs.w] = out[base + xs.w] + kw[2] * g;
                    out[base + xs.w + 1] = out[base + xs.w + 1] + kw[3] * g;
                }
            }
        }
    });

    let mut dw = Tensor::zeros(w.shape());
    dw.data_mut().par_chunks_mut(cin * 4).enumerate().for_each(|(o, row)| {
        for i in 0..cin {
            for t in 0..4 {
                let (a, b) = (t / 2, t % 2);
                let mut acc = T::zero();
                for n in 0..xs.n {
                    let gp = dy.plane(n, o);
                    let xp = x.plane(n, i);
                    for h in 0..ho {
                        for wi in 0..wo {
                            acc = acc + gp[h * wo + wi] * xp[(2 * h + a) * xs.w + 2 * wi + b];
                        }
                    }
                }
                row[i * 4 + t] = acc;
            }
        }
    });
    (dx, dw)
}

// ---------------------------------------------------------------------------
// Pixel shuffle, channel-major sub-pixel layout: y[c, r·h+a, r·w+b] = x[c·r² + a·r + b, h, w]

pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if r == 0 || !xs.c.is_multiple_of(r * r) {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{} channels not divisible by r²={}", xs.c, r * r),
        ));
    }
    let c_out = xs.c / (r * r);
    let ys = Shape::new(xs.n, c_out, xs.h * r, xs.w * r);
    Ok(Tensor::from_fn(ys, |n, c, hh, ww| {
        let (h, a) = (hh / r, hh % r);
        let (w, b) = (ww / r, ww % r);
        x.at(n, c * r * r + a * r + b, h, w)
    }))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let ys = y.shape();
    if r == 0 || !ys.h.is_multiple_of(r) || !ys.w.is_multiple_of(r) {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("spatial dims of {ys} not divisible by {r}"),
        ));
    }
    let xs = Shape::new(ys.n, ys.c * r * r, ys.h / r, ys.w / r);
    Ok(Tensor::from_fn(xs, |n, cc, h, w| {
        let (c, sub) = (cc / (r * r), cc % (r * r));
        let (a, b) = (sub / r, sub % r);
        y.at(n, c, h * r + a, w * r + b)
    }))
}

// ---------------------------------------------------------------------------
// Global average pooling

pub fn gap<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::shape("gap", format!("empty spatial extent in {s}")));
    }
    let inv = T::from_f64(1.0 / s.plane() as f64);
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        x.plane(n, c).iter().copied().sum::<T>() * inv
    }))
}

pub(crate) fn gap_backward<T: Scalar>(xs: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let inv = T::from_f64(1.0 / xs.plane() as f64);
    Tensor::from_fn(xs, |n, c, _, _| dy.at(n, c, 0, 0) * inv)
}

// ---------------------------------------------------------------------------
// Layer normalization over the channel axis at each spatial position

/// Per-position mean and reciprocal standard deviation, laid out `[n][p]`.
fn channel_moments<T: Scalar>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let p = s.plane();
    let inv_c = T::from_f64(1.0 / s.c as f64);
    let mut mean = vec![T::zero(); s.n * p];
    let mut rstd = vec![T::zero(); s.n * p];
    for n in 0..s.n {
        let m = &mut mean[n * p..(n + 1) * p];
        for c in 0..s.c {
            axpy(m, x.plane(n, c), inv_c);
        }
        let v = &mut rstd[n * p..(n + 1) * p];
        for c in 0..s.c {
            for ((acc, &xv), &mv) in v.iter_mut().zip(x.plane(n, c)).zip(m.iter()) {
                let d = xv - mv;
                *acc = *acc + d * d * inv_c;
            }
        }
        v.iter_mut().for_each(|acc| *acc = T::one() / (*acc + eps).sqrt());
    }
    (mean, rstd)
}

pub fn layer_norm_channel<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if gamma.numel() != s.c || beta.numel() != s.c {
        return Err(Error::shape(
            "layer_norm_channel",
            format!(
                "gamma/beta lengths {}/{} for {} channels",
                gamma.numel(),
                beta.numel(),
                s.c
            ),
        ));
    }
    if !(eps > T::zero()) {
        return Err(Error::Invalid("layer norm eps must be positive".into()));
    }
    let p = s.plane();
    let (mean, rstd) = channel_moments(x, eps);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let xp = x.plane(n, c);
            let start = (n * s.c + c) * p;
            let out = &mut y.data_mut()[start..start + p];
            for i in 0..p {
                out[i] = (xp[i] - mean[n * p + i]) * rstd[n * p + i] * g + b;
            }
        }
    }
    Ok(y)
}

pub(crate) fn layer_norm_channel_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let p = s.plane();
    let inv_c = T::from_f64(1.0 / s.c as f64);
    let (mean, rstd) = channel_moments(x, eps);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::vector(s.c));
    let mut dbeta = Tensor::zeros(Shape::vector(s.c));
    let mut xhat = vec![T::zero(); p];
    for n in 0..s.n {
        let m = &mean[n * p..(n + 1) * p];
        let r = &rstd[n * p..(n + 1) * p];
        // mean over channels of g·dy and of g·dy·x̂
        let mut a = vec![T::zero(); p];
        let mut bsum = vec![T::zero(); p];
        for c in 0..s.c {
            let g = gamma.data()[c];
            let xp = x.plane(n, c);
            let gp = dy.plane(n, c);
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in 0..p {
                let xh = (xp[i] - m[i]) * r[i];
                let d = gp[i] * g;
                a[i] = a[i] + d * inv_c;
                bsum[i] = bsum[i] + d * xh * inv_c;
                dg = dg + gp[i] * xh;
                db = db + gp[i];
            }
            dgamma.data_mut()[c] = dgamma.data()[c] + dg;
            dbeta.data_mut()[c] = dbeta.data()[c] + db;
        }
        for c in 0..s.c {
            let g = gamma.data()[c];
            let xp = x.plane(n, c);
            let gp = dy.plane(n, c);
            for i in 0..p {
                xhat[i] = (xp[i] - m[i]) * r[i];
            }
            let start = (n * s.c + c) * p;
            let out = &mut dx.data_mut()[start..start + p];
            for i in 0..p {
                out[i] = r[i] * (gp[i] * g - a[i] - xhat[i] * bsum[i]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Softmax along the last axis with an optional keep-mask

/// Row-wise softmax over the width axis. Masked-out entries get probability
/// exactly zero; survivors are renormalized among themselves. A row with no
/// survivors keeps only its maximum-score entry. Returns the probabilities
/// and, per row, `Some(argmax)` when the fallback fired.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<(Tensor<T>, Vec<Option<usize>>)> {
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(Error::shape(
                "softmax_lastdim",
                format!("mask length {} for {}", m.len(), x.shape()),
            ));
        }
    }
    let s = x.shape();
    let len = s.w;
    let mut y = Tensor::zeros(s);
    let mut fallback = Vec::with_capacity(s.numel() / len.max(1));
    for (r, (row, out)) in x.data().chunks(len).zip(y.data_mut().chunks_mut(len)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * len + j]);
        let mut mx = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            let arg = argmax(row);
            out[arg] = T::one();
            fallback.push(Some(arg));
            continue;
        }
        let mut total = T::zero();
        for (j, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
            if keep(j) {
                *o = (v - mx).exp();
                total = total + *o;
            }
        }
        out.iter_mut().for_each(|o| *o = *o / total);
        fallback.push(None);
    }
    Ok((y, fallback))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Adjoint of softmax given its output probabilities.
pub(crate) fn softmax_lastdim_backward<T: Scalar>(p: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let len = p.shape().w;
    let mut dx = Tensor::zeros(p.shape());
    for ((pr, gr), out) in p
        .data()
        .chunks(len)
        .zip(dy.data().chunks(len))
        .zip(dx.data_mut().chunks_mut(len))
    {
        let inner = dot(pr, gr);
        for ((o, &pv), &gv) in out.iter_mut().zip(pr).zip(gr) {
            *o = pv * (gv - inner);
        }
    }
    dx
}

/// Keep-mask of the selection operator: entries `>= t` survive.
pub fn selection_mask<T: Scalar>(scores: &Tensor<T>, t: T) -> Vec<bool> {
    scores.data().iter().map(|&v| v >= t).collect()
}

/// Softmax across `groups` equal channel blocks: for every channel `c` of a
/// block and every position, normalizes `x[g·C + c]` over `g`.
pub fn group_softmax<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if groups == 0 || !s.c.is_multiple_of(groups) {
        return Err(Error::shape(
            "group_softmax",
            format!("{} channels not divisible into {groups} groups", s.c),
        ));
    }
    let cg = s.c / groups;
    let mut y = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..cg {
            for i in 0..p {
                let idx = |g: usize| ((n * s.c + g * cg + c) * p) + i;
                let mx = (0..groups).map(|g| x.data()[idx(g)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for g in 0..groups {
                    let e = (x.data()[idx(g)] - mx).exp();
                    y.data_mut()[idx(g)] = e;
                    total = total + e;
                }
                for g in 0..groups {
                    y.data_mut()[idx(g)] = y.data()[idx(g)] / total;
                }
            }
        }
    }
    Ok(y)
}

pub(crate) fn group_softmax_backward<T: Scalar>(p: &Tensor<T>, dy: &Tensor<T>, groups: usize) -> Tensor<T> {
    let s = p.shape();
    let cg = s.c / groups;
    let pl = s.plane();
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..cg {
            for i in 0..pl {
                let idx = |g: usize| ((n * s.c + g * cg + c) * pl) + i;
                let inner: T = (0..groups).map(|g| p.data()[idx(g)] * dy.data()[idx(g)]).sum();
                for g in 0..groups {
                    dx.data_mut()[idx(g)] = p.data()[idx(g)] * (dy.data()[idx(g)] - inner);
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic with the two permitted broadcast forms

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Operands have identical shapes.
    Same,
    /// Right operand is an `N×C×1×1` channel descriptor.
    Channel,
    /// Right operand is an `N×1×H×W` single-channel spatial map.
    Spatial,
}

pub fn broadcast_kind(op: &'static str, a: Shape, b: Shape) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b == Shape::new(a.n, a.c, 1, 1) {
        Ok(Broadcast::Channel)
    } else if b == Shape::new(a.n, 1, a.h, a.w) {
        Ok(Broadcast::Spatial)
    } else {
        Err(Error::shape(op, format!("cannot broadcast {b} onto {a}")))
    }
}

fn zip_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let s = a.shape();
    match kind {
        Broadcast::Same => Tensor {
            shape: s,
            data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        },
        Broadcast::Channel => Tensor::from_fn(s, |n, c, h, w| f(a.at(n, c, h, w), b.at(n, c, 0, 0))),
        Broadcast::Spatial => Tensor::from_fn(s, |n, c, h, w| f(a.at(n, c, h, w), b.at(n, 0, h, w))),
    }
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
pub(crate) fn reduce_broadcast<T: Scalar>(g: &Tensor<T>, kind: Broadcast) -> Tensor<T> {
    let s = g.shape();
    match kind {
        Broadcast::Same => g.clone(),
        Broadcast::Channel => Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
            g.plane(n, c).iter().copied().sum()
        }),
        Broadcast::Spatial => {
            let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
            let p = s.plane();
            for n in 0..s.n {
                for c in 0..s.c {
                    axpy(&mut out.data_mut()[n * p..(n + 1) * p], g.plane(n, c), T::one());
                }
            }
            out
        }
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let kind = broadcast_kind("add", a.shape(), b.shape())?;
    Ok(zip_broadcast(a, b, kind, |x, y| x + y))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let kind = broadcast_kind("mul", a.shape(), b.shape())?;
    Ok(zip_broadcast(a, b, kind, |x, y| x * y))
}

/// Elementwise product of `g` with the broadcast expansion of `b`.
pub(crate) fn mul_broadcast<T: Scalar>(g: &Tensor<T>, b: &Tensor<T>, kind: Broadcast) -> Tensor<T> {
    zip_broadcast(g, b, kind, |x, y| x * y)
}

// ---------------------------------------------------------------------------
// Channel concatenation and slicing

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?
        .shape();
    let mut c = 0;
    for t in parts {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape("concat_channels", format!("{s} vs {first}")));
        }
        c += s.c;
    }
    let out = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..first.n {
        for t in parts {
            let chunk = t.shape().c * first.plane();
            data.extend_from_slice(&t.data()[n * chunk..(n + 1) * chunk]);
        }
    }
    Tensor::new(out, data)
}

pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::shape(
            "narrow_channels",
            format!("channels {start}..{} outside {s}", start + len),
        ));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        let base = (n * s.c + start) * p;
        data.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor::new(Shape::new(s.n, len, s.h, s.w), data)
}

/// Scatter `g` back into a zero tensor of shape `full` at channel offset `start`.
pub(crate) fn narrow_backward<T: Scalar>(full: Shape, g: &Tensor<T>, start: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(full);
    let p = full.plane();
    let len = g.shape().c;
    for n in 0..full.n {
        let dst = (n * full.c + start) * p;
        out.data_mut()[dst..dst + len * p].copy_from_slice(&g.data()[n * len * p..(n + 1) * len * p]);
    }
    out
}

pub fn split_channels_half<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.shape().c;
    if !c.is_multiple_of(2) {
        return Err(Error::shape("split_channels_half", format!("odd channel count {c}")));
    }
    Ok((narrow_channels(x, 0, c / 2)?, narrow_channels(x, c / 2, c / 2)?))
}

// ---------------------------------------------------------------------------
// Channel-axis attention primitives. Heads partition the channel axis into
// contiguous groups of `d = C / heads` rows, each row a flattened H·W plane.

fn check_heads(op: &'static str, c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::shape(op, format!("{c} channels not divisible by {heads} heads")));
    }
    Ok(c / heads)
}

/// Per-head Gram matrix `S[n, h, i, j] = <q_i, k_j>` over spatial positions.
pub fn channel_gram<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = q.shape();
    if k.shape() != s {
        return Err(Error::shape("channel_gram", format!("{} vs {}", s, k.shape())));
    }
    let d = check_heads("channel_gram", s.c, heads)?;
    let mut out = Tensor::zeros(Shape::new(s.n, heads, d, d));
    out.data_mut().par_chunks_mut(d).enumerate().for_each(|(row, dst)| {
        let n = row / (heads * d);
        let hd = (row / d) % heads;
        let i = row % d;
        let qi = q.plane(n, hd * d + i);
        for (j, v) in dst.iter_mut().enumerate() {
            *v = dot(qi, k.plane(n, hd * d + j));
        }
    });
    Ok(out)
}

pub(crate) fn channel_gram_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    ds: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, Tensor<T>) {
    // dq_i = Σ_j dS_ij k_j ; dk_j = Σ_i dS_ij q_i
    let dq = attend_raw(ds, k, heads, false);
    let dk = attend_raw(ds, q, heads, true);
    (dq, dk)
}

/// `out[n, h·d + i] = Σ_j A[n, h, i, j] v[n, h·d + j]`, or with `A` transposed.
fn attend_raw<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>, heads: usize, transpose: bool) -> Tensor<T> {
    let s = v.shape();
    let d = s.c / heads;
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    out.data_mut().par_chunks_mut(p).enumerate().for_each(|(k, dst)| {
        let (n, ch) = (k / s.c, k % s.c);
        let (hd, i) = (ch / d, ch % d);
        for j in 0..d {
            let coef = if transpose { a.at(n, hd, j, i) } else { a.at(n, hd, i, j) };
            axpy(dst, v.plane(n, hd * d + j), coef);
        }
    });
    out
}

pub fn attend<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = v.shape();
    let d = check_heads("attend", s.c, heads)?;
    if a.shape() != Shape::new(s.n, heads, d, d) {
        return Err(Error::shape(
            "attend",
            format!("attention {} does not match values {s} with {heads} heads", a.shape()),
        ));
    }
    Ok(attend_raw(a, v, heads, false))
}

pub(crate) fn attend_backward<T: Scalar>(
    a: &Tensor<T>,
    v: &Tensor<T>,
    dout: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, Tensor<T>) {
    let dv = attend_raw(a, dout, heads, true);
    // dA_ij = <dout_i, v_j>
    let da = channel_gram(dout, v, heads).expect("shapes validated in forward");
    (da, dv)
}

/// Divides each head's scores by its `β`, clamped below at [`BETA_FLOOR`].
pub fn head_div<T: Scalar>(s: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let sh = s.shape();
    if beta.numel() != sh.c {
        return Err(Error::shape(
            "head_div",
            format!("{} beta values for {} heads", beta.numel(), sh.c),
        ));
    }
    let floor = T::from_f64(BETA_FLOOR);
    Ok(Tensor::from_fn(sh, |n, h, i, j| s.at(n, h, i, j) / beta.data()[h].max(floor)))
}

pub(crate) fn head_div_backward<T: Scalar>(s: &Tensor<T>, beta: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let sh = s.shape();
    let floor = T::from_f64(BETA_FLOOR);
    let ds = Tensor::from_fn(sh, |n, h, i, j| dy.at(n, h, i, j) / beta.data()[h].max(floor));
    let mut db = Tensor::zeros(beta.shape());
    for h in 0..sh.c {
        let b = beta.data()[h];
        if b <= floor {
            continue;
        }
        let mut acc = T::zero();
        for n in 0..sh.n {
            acc = acc + dot(dy.plane(n, h), s.plane(n, h));
        }
        db.data_mut()[h] = -acc / (b * b);
    }
    (ds, db)
}

// ---------------------------------------------------------------------------
// Loss

pub const PSNR_LOSS_EPS: f64 = 1e-8;

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", format!("{} vs {}", a.shape(), b.shape())));
    }
    let total: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(total / T::from_f64(a.numel() as f64))
}

/// `10·log10(MSE + ε)`, the negated peak-1 PSNR used as the training objective.
pub fn psnr_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let m = mse(pred, target)?;
    Ok(T::from_f64(10.0) * (m + T::from_f64(PSNR_LOSS_EPS)).log10())
}

pub(crate) fn psnr_loss_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, g: T) -> Tensor<T> {
    let m = mse(pred, target).expect("shapes validated in forward");
    let n = pred.numel() as f64;
    let k = g * T::from_f64(10.0 / std::f64::consts::LN_10 * 2.0 / n) / (m + T::from_f64(PSNR_LOSS_EPS));
    Tensor {
        shape: pred.shape(),
        data: pred.data().iter().zip(target.data()).map(|(&p, &t)| k * (p - t)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    fn seq(shape: Shape) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_, _, _, _| {
            i += 1.0;
            (i * 0.37f64).sin()
        })
    }

    #[test]
    fn conv1x1_identity_is_bit_exact() {
        let x = seq(Shape::new(2, 3, 4, 5)).cast::<f32>();
        let w = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0f32 } else { 0.0 });
        let y = conv2d_1x1(&x, &w, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv1x1_zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
        let w = seq(Shape::new(4, 2, 1, 1));
        let b = t(Shape::vector(4), &[0.5, -1.0, 2.0, 3.0]);
        let y = conv2d_1x1(&x, &w, Some(&b)).unwrap();
        for o in 0..4 {
            assert!(y.plane(0, o).iter().all(|&v| v == b.data()[o]));
        }
    }

    #[test]
    fn conv1x1_hand_dot_products() {
        let x = t(Shape::new(1, 2, 1, 1), &[1.0, 2.0]);
        let w = t(Shape::new(2, 2, 1, 1), &[1.0, 1.0, 0.0, 2.0]);
        let y = conv2d_1x1(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn conv1x1_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        let w = Tensor::<f64>::zeros(Shape::new(2, 2, 1, 1));
        assert!(matches!(conv2d_1x1(&x, &w, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn dwconv_delta_kernel_is_identity() {
        let x = seq(Shape::new(2, 3, 5, 4));
        let w = Tensor::from_fn(Shape::new(3, 1, 3, 3), |_, _, h, w| if h == 1 && w == 1 { 1.0 } else { 0.0 });
        assert_eq!(dwconv2d_3x3(&x, &w, None).unwrap(), x);
    }

    #[test]
    fn dwconv_counts_padded_taps() {
        let c = 1.5;
        let x = Tensor::full(Shape::new(1, 2, 4, 5), c);
        let w = Tensor::ones(Shape::new(2, 1, 3, 3));
        let y = dwconv2d_3x3(&x, &w, None).unwrap();
        for ch in 0..2 {
            assert_eq!(y.at(0, ch, 1, 1), 9.0 * c);
            assert_eq!(y.at(0, ch, 2, 3), 9.0 * c);
            assert_eq!(y.at(0, ch, 0, 0), 4.0 * c);
            assert_eq!(y.at(0, ch, 3, 4), 4.0 * c);
            assert_eq!(y.at(0, ch, 0, 2), 6.0 * c);
        }
    }

    #[test]
    fn dwconv_zero_input_gives_bias_and_rejects_bad_kernel() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
        let w = seq(Shape::new(2, 1, 3, 3));
        let b = t(Shape::vector(2), &[0.25, -4.0]);
        let y = dwconv2d_3x3(&x, &w, Some(&b)).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.25));
        assert!(y.plane(0, 1).iter().all(|&v| v == -4.0));
        let bad = Tensor::<f64>::zeros(Shape::new(2, 2, 3, 3));
        assert!(dwconv2d_3x3(&x, &bad, None).is_err());
    }

    #[test]
    fn downsample_cases() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::ones(Shape::new(2, 1, 2, 2));
        let y = downsample(&x, &w).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 10.0);

        // one tap per output channel on a constant input
        let x = Tensor::<f64>::ones(Shape::new(1, 2, 4, 6));
        let w = Tensor::from_fn(Shape::new(4, 2, 2, 2), |o, i, a, b| {
            if i == o % 2 && a * 2 + b == o { 1.0 } else { 0.0 }
        });
        let y = downsample(&x, &w).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 2, 3));
        assert!(y.data().iter().all(|&v| v == 1.0));

        let z = downsample(&Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4)), &w).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let odd = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 4));
        assert!(downsample(&odd, &w).is_err());
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = t(Shape::new(1, 4, 1, 1), &[1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = seq(Shape::new(2, 3, 2, 2));
        assert_eq!(pixel_shuffle(&z, 1).unwrap(), z);
        assert!(pixel_shuffle(&z, 2).is_err());
        let c = Tensor::full(Shape::new(1, 8, 3, 2), 0.75);
        assert!(pixel_shuffle(&c, 2).unwrap().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn pixel_unshuffle_inverts_shuffle() {
        let x = seq(Shape::new(2, 18, 3, 2));
        let y = pixel_shuffle(&x, 3).unwrap();
        assert_eq!(pixel_unshuffle(&y, 3).unwrap(), x);
    }

    #[test]
    fn gap_cases() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(gap(&x).unwrap().data(), &[2.5]);
        let c = Tensor::full(Shape::new(2, 3, 4, 4), 0.5);
        assert!(gap(&c).unwrap().data().iter().all(|&v| v == 0.5));
        let s = seq(Shape::new(1, 3, 3, 4));
        let a = gap(&s).unwrap();
        let b = gap(&s.flip_horizontal()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::<f64>::ones(Shape::vector(2));
        let b = Tensor::<f64>::zeros(Shape::vector(2));
        let x = t(Shape::new(1, 2, 1, 1), &[-1.0, 1.0]);
        let y = layer_norm_channel(&x, &g, &b, 1e-6).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);

        // constant channel vector collapses to beta
        let x = Tensor::full(Shape::new(1, 3, 2, 2), 4.0);
        let beta = t(Shape::vector(3), &[0.1, 0.2, 0.3]);
        let gamma = t(Shape::vector(3), &[5.0, 6.0, 7.0]);
        let y = layer_norm_channel(&x, &gamma, &beta, 1e-6).unwrap();
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| v == beta.data()[c]));
        }
        assert!(layer_norm_channel(&x, &gamma, &beta, 0.0).is_err());
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = seq(Shape::new(2, 6, 3, 3));
        let g = Tensor::<f64>::ones(Shape::vector(6));
        let b = Tensor::<f64>::zeros(Shape::vector(6));
        let y = layer_norm_channel(&x, &g, &b, 1e-12).unwrap();
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let v: Vec<f64> = (0..6).map(|c| y.at(n, c, h, w)).collect();
                    let m = v.iter().sum::<f64>() / 6.0;
                    let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 6.0;
                    assert!(m.abs() < 1e-12);
                    assert!((var - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 4));
        let (p, _) = softmax_lastdim(&x, None).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = t(Shape::new(1, 1, 1, 2), &[0.0, 3.0f64.ln()]);
        let (p, _) = softmax_lastdim(&x, None).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);

        let x = t(Shape::new(1, 1, 1, 3), &[5.0, -2.0, 1.0]);
        let (p, fb) = softmax_lastdim(&x, Some(&[false, true, false])).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0]);
        assert_eq!(fb, vec![None]);
    }

    #[test]
    fn selection_masked_softmax_closed_form() {
        let x = t(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]);
        let mask = selection_mask(&x, 0.0);
        assert_eq!(mask, vec![false, true, true]);
        let (p, _) = softmax_lastdim(&x, Some(&mask)).unwrap();
        let z = 1.0 + 2.0f64.exp();
        assert_eq!(p.data()[0], 0.0);
        assert!((p.data()[1] - 1.0 / z).abs() < 1e-15);
        assert!((p.data()[2] - 2.0f64.exp() / z).abs() < 1e-15);

        // every entry below the threshold: one-hot on the max
        let mask = selection_mask(&x, 10.0);
        let (p, fb) = softmax_lastdim(&x, Some(&mask)).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(fb, vec![Some(2)]);

        // -inf keeps everything
        let mask = selection_mask(&x, f64::NEG_INFINITY);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn broadcast_rules() {
        let x = seq(Shape::new(2, 3, 2, 2));
        let d = seq(Shape::new(2, 3, 1, 1));
        let y = add(&x, &d).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..2 {
                    for w in 0..2 {
                        assert_eq!(y.at(n, c, h, w), x.at(n, c, h, w) + d.at(n, c, 0, 0));
                    }
                }
            }
        }
        assert_eq!(mul(&x, &Tensor::ones(x.shape())).unwrap(), x);
        let m = seq(Shape::new(2, 1, 2, 2));
        assert!(mul(&x, &m).is_ok());
        assert!(add(&x, &Tensor::zeros(Shape::new(1, 3, 1, 1))).is_err());
        assert!(add(&x, &Tensor::zeros(Shape::new(2, 3, 2, 1))).is_err());
    }

    #[test]
    fn split_then_concat_round_trips() {
        let x = seq(Shape::new(2, 6, 3, 2));
        let (a, b) = split_channels_half(&x).unwrap();
        assert_eq!(a.shape().c, 3);
        assert_eq!(a.at(1, 2, 2, 1), x.at(1, 2, 2, 1));
        assert_eq!(b.at(1, 0, 0, 0), x.at(1, 3, 0, 0));
        assert_eq!(concat_channels(&[&a, &b]).unwrap(), x);
        assert!(split_channels_half(&seq(Shape::new(1, 3, 1, 1))).is_err());
    }

    #[test]
    fn group_softmax_sums_to_one() {
        let x = seq(Shape::new(2, 12, 1, 1));
        let y = group_softmax(&x, 3).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                let s: f64 = (0..3).map(|g| y.at(n, g * 4 + c, 0, 0)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_and_attend_match_direct_loops() {
        let q = seq(Shape::new(1, 4, 2, 3));
        let k = q.map(|v| v * 0.5 + 0.1);
        let s = channel_gram(&q, &k, 2).unwrap();
        let direct: f64 = (0..6).map(|p| q.plane(0, 3)[p] * k.plane(0, 2)[p]).sum();
        assert!((s.at(0, 1, 1, 0) - direct).abs() < 1e-14);
        let o = attend(&s, &k, 2).unwrap();
        let direct: f64 = (0..2).map(|j| s.at(0, 0, 1, j) * k.plane(0, j)[4]).sum();
        assert!((o.plane(0, 1)[4] - direct).abs() < 1e-14);
        assert!(channel_gram(&q, &k, 3).is_err());
    }

    #[test]
    fn psnr_loss_floor() {
        let x = seq(Shape::new(1, 3, 4, 4));
        let l = psnr_loss(&x, &x).unwrap();
        assert!((l + 80.0).abs() < 1e-9);
    }
}
