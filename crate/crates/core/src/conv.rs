//! Convolution kernels on NCHW tensors via im2col + GEMM.
//!
//! `conv_transpose2d` is implemented as the adjoint of `conv2d`, so the two share
//! the same unfold/fold helpers.

use std::ops::Range;

use crate::scalar::{gemm_ld, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry { kernel, stride, pad }
    }

    /// Output extent of a forward convolution over an input of extent `n`.
    pub fn conv_out(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output extent of a transposed convolution over an input of extent `n`.
    pub fn transpose_out(&self, n: usize, output_padding: usize) -> usize {
        (n - 1) * self.stride + self.kernel + output_padding - 2 * self.pad
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` lies inside `0..w`.
#[inline]
fn valid_cols(g: ConvGeometry, kx: usize, w: usize, ow: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = if (w as isize) <= off { 0 } else { (((w as isize - off) + s - 1) / s) as usize };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

/// Unfolds output rows `rows` of one `[C, H, W]` image into `[C*k*k, rows.len()*ow]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    rows: Range<usize>,
    ow: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let plane = rows.len() * ow;
    for ci in 0..c {
        let src = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx, w, ow);
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[r * ow..(r + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let x0 = (lo * g.stride + kx) - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&srow[x0..x0 + hi - lo]);
                    } else {
                        for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = srow[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[C, H, W]` image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    rows: Range<usize>,
    ow: usize,
    img: &mut [T],
) {
    let k = g.kernel;
    let plane = rows.len() * ow;
    for ci in 0..c {
        let dst = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx, w, ow);
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let x0 = (lo * g.stride + kx) - g.pad;
                    let srow = &src[r * ow + lo..r * ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in drow[x0..x0 + hi - lo].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in srow.iter().enumerate() {
                            drow[x0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(oy, iy, lo, hi, x0)` for every output row of a stride-1 tap `(ky, kx)` that reads
/// input row `iy`, with output columns `lo..hi` reading input columns from `x0`.
#[inline]
fn for_each_tap_row(
    g: ConvGeometry,
    ky: usize,
    kx: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let (lo, hi) = valid_cols(g, kx, w, ow);
    if lo >= hi {
        return;
    }
    let x0 = lo + kx - g.pad;
    for oy in 0..oh {
        let iy = (oy + ky) as isize - g.pad as isize;
        if iy >= 0 && iy < h as isize {
            f(oy, iy as usize, lo, hi, x0);
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Shift-and-add convolution for stride 1 and few output channels, where im2col would be
/// dominated by memory traffic.
fn conv2d_direct<T: Scalar>(
    x: &[T],
    w: &[T],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    g: ConvGeometry,
    out: &mut [T],
) {
    let k = g.kernel;
    let (oh, ow) = (g.conv_out(h), g.conv_out(wd));
    for ni in 0..n {
        for oi in 0..o {
            let dst = &mut out[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let src = &x[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((oi * c + ci) * k + ky) * k + kx];
                        for_each_tap_row(g, ky, kx, h, wd, oh, ow, |oy, iy, lo, hi, x0| {
                            let d = &mut dst[oy * ow + lo..oy * ow + hi];
                            for (a, &b) in d.iter_mut().zip(&src[iy * wd + x0..iy * wd + x0 + hi - lo]) {
                                *a += wv * b;
                            }
                        });
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_direct_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    g: ConvGeometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let k = g.kernel;
    let (oh, ow) = (g.conv_out(h), g.conv_out(wd));
    for ni in 0..n {
        for oi in 0..o {
            let gy = &dy[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            for ci in 0..c {
                let base = (ni * c + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((oi * c + ci) * k + ky) * k + kx;
                        let wv = w[wi];
                        let mut acc = T::zero();
                        for_each_tap_row(g, ky, kx, h, wd, oh, ow, |oy, iy, lo, hi, x0| {
                            let grow = &gy[oy * ow + lo..oy * ow + hi];
                            let off = base + iy * wd + x0;
                            if let Some(dx) = dx.as_deref_mut() {
                                for (a, &b) in dx[off..off + hi - lo].iter_mut().zip(grow) {
                                    *a += wv * b;
                                }
                            }
                            if dw.is_some() {
                                acc += dot(grow, &x[off..off + hi - lo]);
                            }
                        });
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[wi] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Output channel count up to which stride-1 convolutions skip im2col.
const DIRECT_MAX_OUT: usize = 4;

fn dims4(t: &Tensor<impl Scalar>) -> (usize, usize, usize, usize) {
    match *t.shape() {
        [n, c, h, w] => (n, c, h, w),
        ref s => panic!("expected NCHW tensor, got {s:?}"),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, o, h, w) = dims4(dy);
    let plane = h * w;
    let mut db = vec![T::zero(); o];
    for ni in 0..n {
        for (oi, acc) in db.iter_mut().enumerate() {
            let base = (ni * o + oi) * plane;
            *acc += dy.data()[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[o], db)
}

/// Number of elements a patch-column buffer may hold; larger unfolds are processed in row bands.
const COL_BUDGET: usize = 1 << 17;

/// Splits `0..rows` into bands whose unfolded columns (`per_row` elements each) fit the budget.
fn bands(rows: usize, per_row: usize) -> impl Iterator<Item = Range<usize>> {
    let step = (COL_BUDGET / per_row.max(1)).clamp(1, rows.max(1));
    (0..rows).step_by(step).map(move |r| r..(r + step).min(rows))
}

/// `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: ConvGeometry) -> Tensor<T> {
    let (n, c, h, wd) = dims4(x);
    let (o, wc, kh, kw) = dims4(w);
    assert!(wc == c && kh == g.kernel && kw == g.kernel, "conv2d weight {:?} vs input {:?}", w.shape(), x.shape());
    let (oh, ow) = (g.conv_out(h), g.conv_out(wd));
    let ckk = c * g.kernel * g.kernel;
    let plane = oh * ow;
    let mut out = vec![T::zero(); n * o * plane];
    if g.stride == 1 && o <= DIRECT_MAX_OUT {
        conv2d_direct(x.data(), w.data(), n, c, h, wd, o, g, &mut out);
    } else {
        let mut cols = vec![T::zero(); ckk * plane.min(COL_BUDGET / ckk.max(1) / ow.max(1) * ow).max(ow)];
        for ni in 0..n {
            let img = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
            for rows in bands(oh, ckk * ow) {
                let bp = rows.len() * ow;
                im2col(img, c, h, wd, g, rows.clone(), ow, &mut cols);
                let dst = &mut out[ni * o * plane + rows.start * ow..];
                gemm_ld(o, ckk, bp, w.data(), ckk, false, &cols, bp, false, T::zero(), dst, plane);
            }
        }
    }
    if let Some(b) = b {
        add_bias(&mut out, b.data(), plane);
    }
    Tensor::from_vec(&[n, o, oh, ow], out)
}

/// `[O, C, k, k] -> [C, O, k, k]` with both spatial axes reversed.
fn flip_kernel<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let (o, c, k, _) = dims4(w);
    let src = w.data();
    let mut out = vec![T::zero(); src.len()];
    for oi in 0..o {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    out[((ci * o + oi) * k + k - 1 - ky) * k + k - 1 - kx] = src[((oi * c + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    Tensor::from_vec(&[c, o, k, k], out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (n, c, h, wd) = dims4(x);
    let (o, _, _, _) = dims4(w);
    let (_, _, oh, ow) = dims4(dy);
    let ckk = c * g.kernel * g.kernel;
    let plane = oh * ow;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    if g.stride == 1 && o <= DIRECT_MAX_OUT {
        conv2d_direct_backward(x.data(), w.data(), dy.data(), n, c, h, wd, o, g, dx.as_deref_mut(), dw.as_deref_mut());
    } else {
        // A stride-1 input gradient is itself a convolution of `dy` with the flipped kernel, which
        // avoids the scatter in col2im.
        let flipped = g.stride == 1 && g.pad < g.kernel && dx.is_some();
        if flipped {
            let dxt = conv2d(dy, &flip_kernel(w), None, ConvGeometry::new(g.kernel, 1, g.kernel - 1 - g.pad));
            dx = Some(dxt.into_data());
        }
        let mut cols = vec![T::zero(); ckk * plane.min(COL_BUDGET / ckk.max(1) / ow.max(1) * ow).max(ow)];
        for ni in 0..n {
            let img = ni * c * h * wd..(ni + 1) * c * h * wd;
            for rows in bands(oh, ckk * ow) {
                let bp = rows.len() * ow;
                let gy = &dy.data()[ni * o * plane + rows.start * ow..];
                if let Some(dw) = dw.as_mut() {
                    im2col(&x.data()[img.clone()], c, h, wd, g, rows.clone(), ow, &mut cols);
                    gemm_ld(o, bp, ckk, gy, plane, false, &cols, bp, true, T::one(), dw, ckk);
                }
                if let Some(dx) = dx.as_mut().filter(|_| !flipped) {
                    gemm_ld(ckk, o, bp, w.data(), ckk, true, gy, plane, false, T::zero(), &mut cols, bp);
                    col2im(&cols, c, h, wd, g, rows.clone(), ow, &mut dx[img.clone()]);
                }
            }
        }
    }
    (dx.map(|d| Tensor::from_vec(x.shape(), d)), dw.map(|d| Tensor::from_vec(w.shape(), d)), bias_grad(dy))
}

/// `x: [N, C, H, W]`, `w: [C, O, k, k]`, `b: [O]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeometry,
    output_padding: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = dims4(x);
    let (wc, o, kh, kw) = dims4(w);
    assert!(
        wc == c && kh == g.kernel && kw == g.kernel,
        "conv_transpose2d weight {:?} vs input {:?}",
        w.shape(),
        x.shape()
    );
    let (oh, ow) = (g.transpose_out(h, output_padding), g.transpose_out(wd, output_padding));
    let okk = o * g.kernel * g.kernel;
    let plane = h * wd;
    let mut cols = vec![T::zero(); okk * plane.min(COL_BUDGET / okk.max(1) / wd.max(1) * wd).max(wd)];
    let mut out = vec![T::zero(); n * o * oh * ow];
    for ni in 0..n {
        let dst = &mut out[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        for rows in bands(h, okk * wd) {
            let bp = rows.len() * wd;
            let src = &x.data()[ni * c * plane + rows.start * wd..];
            gemm_ld(okk, c, bp, w.data(), okk, true, src, plane, false, T::zero(), &mut cols, bp);
            col2im(&cols, o, oh, ow, g, rows, wd, dst);
        }
    }
    if let Some(b) = b {
        add_bias(&mut out, b.data(), oh * ow);
    }
    Tensor::from_vec(&[n, o, oh, ow], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (n, c, h, wd) = dims4(x);
    let (_, o, _, _) = dims4(w);
    let (_, _, oh, ow) = dims4(dy);
    let okk = o * g.kernel * g.kernel;
    let plane = h * wd;
    let mut cols = vec![T::zero(); okk * plane.min(COL_BUDGET / okk.max(1) / wd.max(1) * wd).max(wd)];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for ni in 0..n {
        let gy = &dy.data()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        for rows in bands(h, okk * wd) {
            let bp = rows.len() * wd;
            let off = ni * c * plane + rows.start * wd;
            im2col(gy, o, oh, ow, g, rows.clone(), wd, &mut cols);
            if let Some(dx) = dx.as_mut() {
                gemm_ld(c, okk, bp, w.data(), okk, false, &cols, bp, false, T::zero(), &mut dx[off..], plane);
            }
            if let Some(dw) = dw.as_mut() {
                gemm_ld(c, bp, okk, &x.data()[off..], plane, false, &cols, bp, true, T::one(), dw, okk);
            }
        }
    }
    (dx.map(|d| Tensor::from_vec(x.shape(), d)), dw.map(|d| Tensor::from_vec(w.shape(), d)), bias_grad(dy))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Doubles one axis of a `[outer, n, inner]` layout with half-pixel linear interpolation and
/// border clamping: output `2i` is `0.75 x[i] + 0.25 x[i-1]`, output `2i+1` is `0.75 x[i] + 0.25 x[i+1]`.
fn lerp_up2<T: Scalar>(src: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (a, b) = (T::cast(0.75), T::cast(0.25));
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        let s = &src[o * n * inner..(o + 1) * n * inner];
        let d = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for i in 0..n {
            let (prev, next) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let (xi, xp, xn) = (
                &s[i * inner..(i + 1) * inner],
                &s[prev * inner..(prev + 1) * inner],
                &s[next * inner..(next + 1) * inner],
            );
            let (lo, hi) = d[2 * i * inner..(2 * i + 2) * inner].split_at_mut(inner);
            for j in 0..inner {
                lo[j] = a * xi[j] + b * xp[j];
                hi[j] = a * xi[j] + b * xn[j];
            }
        }
    }
    out
}

/// Adjoint of [`lerp_up2`].
fn lerp_up2_adjoint<T: Scalar>(g: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (a, b) = (T::cast(0.75), T::cast(0.25));
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let gs = &g[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        let d = &mut out[o * n * inner..(o + 1) * n * inner];
        for i in 0..n {
            let (prev, next) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let (lo, hi) = (&gs[2 * i * inner..(2 * i + 1) * inner], &gs[(2 * i + 1) * inner..(2 * i + 2) * inner]);
            for j in 0..inner {
                d[i * inner + j] += a * (lo[j] + hi[j]);
                d[prev * inner + j] += b * lo[j];
                d[next * inner + j] += b * hi[j];
            }
        }
    }
    out
}

/// Bilinear (half-pixel, border-clamped) upsampling by 2 in both spatial axes.
pub fn upsample_bilinear2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    let rows = lerp_up2(x.data(), n * c, h, w);
    let both = lerp_up2(&rows, n * c * 2 * h, w, 1);
    Tensor::from_vec(&[n, c, 2 * h, 2 * w], both)
}

/// Adjoint of [`upsample_bilinear2`].
pub fn upsample_bilinear2_adjoint<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = dims4(dy);
    let (h, w) = (oh / 2, ow / 2);
    let cols = lerp_up2_adjoint(dy.data(), n * c * oh, w, 1);
    let both = lerp_up2_adjoint(&cols, n * c, h, w);
    Tensor::from_vec(&[n, c, h, w], both)
}

/// Adjoint of [`upsample_nearest`]: sums each `factor x factor` block.
pub fn sum_pool<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, oh, ow) = dims4(dy);
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![T::zero(); n * c * h * w];
    for (pi, plane) in dy.data().chunks(oh * ow).enumerate() {
        let dst = &mut out[pi * h * w..(pi + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += plane[oy * ow + ox];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Block-average downsampling by an integer factor (area interpolation).
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = sum_pool(x, factor);
    s.scale(T::one() / T::cast((factor * factor) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
        let (n, c, h, wd) = dims4(x);
        let (o, _, k, _) = dims4(w);
        let (oh, ow) = (g.conv_out(h), g.conv_out(wd));
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[oi, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[ni, oi, oy, ox], s);
                    }
                }
            }
        }
        out
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, o) in [(1, 1, 4), (1, 1, 6), (1, 0, 1), (2, 1, 4), (2, 0, 2)] {
            let g = ConvGeometry::new(3, stride, pad);
            let x = Tensor::uniform(&[2, 3, 7, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[o, 3, 3, 3], -1.0, 1.0, &mut rng);
            let got = conv2d(&x, &w, None, g);
            let want = conv_naive(&x, &w, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_backward_is_adjoint() {
        // The convolution is bilinear, so <y, r> == <x, dx> == <w, dw> for dy = r.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (stride, pad, o) in [(1, 1, 2), (1, 1, 7), (1, 0, 3), (2, 1, 2), (2, 1, 5)] {
            let g = ConvGeometry::new(3, stride, pad);
            let x = Tensor::uniform(&[2, 3, 9, 8], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[o, 3, 3, 3], -1.0, 1.0, &mut rng);
            let y = conv2d(&x, &w, None, g);
            let r = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
            let (dx, dw, _) = conv2d_backward(&x, &w, &r, g, true, true);
            let yr = dot(&y, &r);
            assert!((yr - dot(&x, &dx.unwrap())).abs() < 1e-10, "dx, o={o} stride={stride}");
            assert!((yr - dot(&w, &dw.unwrap())).abs() < 1e-10, "dw, o={o} stride={stride}");
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(y), x> == <y, conv_t(x)> for matching geometry.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeometry::new(4, 2, 1);
        let w = Tensor::uniform(&[3, 2, 4, 4], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[1, 2, 8, 10], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[1, 3, 4, 5], -1.0, 1.0, &mut rng);
        let cy = conv2d(&y, &w, None, g);
        assert_eq!(cy.shape(), x.shape());
        let tx = conv_transpose2d(&x, &w, None, g, 0);
        assert_eq!(tx.shape(), y.shape());
        assert!((dot(&cy, &x) - dot(&y, &tx)).abs() < 1e-10);
    }

    #[test]
    fn bilinear_upsample_values_and_adjoint() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 3], &[0.0, 4.0, 8.0]);
        let y = upsample_bilinear2(&x);
        assert_eq!(y.shape(), &[1, 1, 2, 6]);
        assert_eq!(&y.data()[..6], &[0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
        assert_eq!(&y.data()[6..], &y.data()[..6]);
        let c = upsample_bilinear2(&Tensor::<f64>::full(&[2, 3, 4, 5], 0.7));
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[2, 2, 3, 5], -1.0, 1.0, &mut rng);
        let r = Tensor::uniform(&[2, 2, 6, 10], -1.0, 1.0, &mut rng);
        assert!((dot(&upsample_bilinear2(&x), &r) - dot(&x, &upsample_bilinear2_adjoint(&r))).abs() < 1e-12);
    }

    #[test]
    fn upsample_and_sum_pool_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 2, 3, 4], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[1, 2, 6, 8], -1.0, 1.0, &mut rng);
        assert!((dot(&upsample_nearest(&x, 2), &y) - dot(&x, &sum_pool(&y, 2))).abs() < 1e-12);
        let avg = avg_pool(&upsample_nearest(&x, 2), 2);
        for (a, b) in avg.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
