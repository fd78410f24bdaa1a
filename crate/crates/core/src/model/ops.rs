//! Forward and backward kernels of the layers used by the U-Net.
//!
//! All spatial operators use mirror-reflect padding.

use std::ops::Range;

use super::tensor::Tensor;
use crate::data::reflect_index;

/// Fixed 3x3 binomial low-pass filter used by max-blur pooling.
pub fn blur_kernel() -> [[f32; 3]; 3] {
    [
        [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
        [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
        [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    ]
}

/// `C = A * B + beta * C`, with `C` addressed by row stride `rsc`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: callers pass buffers holding every element addressed through
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Unfolds rows `rows` of batch item `item` of `x` into a
/// `(C * k * k) x (rows.len() * W)` column matrix.
pub fn im2col(x: &Tensor, item: usize, rows: Range<usize>, k: usize, col: &mut [f32]) {
    let (c, n, h, w) = x.dims();
    let hw = h * w;
    let px = rows.len() * w;
    assert_eq!(col.len(), c * k * k * px);
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let plane = &x.data[(ci * n + item) * hw..][..hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * px..(row + 1) * px];
                let off = kx as isize - pad;
                let (lo, hi) = interior(off, w);
                for (i, y) in rows.clone().enumerate() {
                    let sy = reflect_index(y as isize + ky as isize - pad, h);
                    let src = &plane[sy * w..][..w];
                    let d = &mut dst[i * w..][..w];
                    if lo < hi {
                        d[lo..hi].copy_from_slice(
                            &src[(lo as isize + off) as usize..(hi as isize + off) as usize],
                        );
                    }
                    for xx in (0..lo).chain(hi.max(lo)..w) {
                        d[xx] = src[reflect_index(xx as isize + off, w)];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds column gradients back onto item `item` of `x`.
pub fn col2im(col: &[f32], x: &mut Tensor, item: usize, rows: Range<usize>, k: usize) {
    let (c, n, h, w) = x.dims();
    let hw = h * w;
    let px = rows.len() * w;
    assert_eq!(col.len(), c * k * k * px);
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let plane = &mut x.data[(ci * n + item) * hw..][..hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * px..(row + 1) * px];
                let off = kx as isize - pad;
                let (lo, hi) = interior(off, w);
                for (i, y) in rows.clone().enumerate() {
                    let sy = reflect_index(y as isize + ky as isize - pad, h);
                    let d = &mut plane[sy * w..][..w];
                    let s = &src[i * w..][..w];
                    if lo < hi {
                        let shifted =
                            &mut d[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (acc, g) in shifted.iter_mut().zip(&s[lo..hi]) {
                            *acc += g;
                        }
                    }
                    for xx in (0..lo).chain(hi.max(lo)..w) {
                        d[reflect_index(xx as isize + off, w)] += s[xx];
                    }
                }
            }
        }
    }
}

/// Range of output columns whose source column `x + off` lies inside `0..w`.
#[inline]
fn interior(off: isize, w: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (w as isize - off.max(0)).max(0) as usize;
    (lo.min(w), hi)
}

/// Column-matrix size (in floats) kept small enough to stay cache resident.
const COL_BUDGET: usize = 1 << 16;

/// Row bands of an `h x w` plane whose column matrices fit [`COL_BUDGET`].
fn row_bands(h: usize, w: usize, kk: usize) -> impl Iterator<Item = Range<usize>> {
    let band = (COL_BUDGET / (kk * w)).clamp(1, h);
    (0..h).step_by(band).map(move |y| y..(y + band).min(h))
}

/// What a convolution keeps for its backward pass.
pub struct ConvCache {
    pub input: Tensor,
    /// Post-activation output when followed by a ReLU.
    pub relu_out: Option<Vec<f32>>,
}

/// `weight` is `cout x (cin * k * k)` row-major. Column matrices are built
/// one batch item at a time so the working set stays small.
pub fn conv_forward(
    x: &Tensor,
    weight: &[f32],
    bias: &[f32],
    cout: usize,
    k: usize,
    relu: bool,
    keep: bool,
) -> (Tensor, Option<ConvCache>) {
    let (cin, n, h, w) = x.dims();
    let kk = cin * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight shape");
    let hw = h * w;
    let cols = n * hw;
    let mut out = Tensor::zeros(cout, n, h, w);
    if k == 1 {
        sgemm(
            cout,
            cin,
            cols,
            weight,
            (cin as isize, 1),
            &x.data,
            (cols as isize, 1),
            0.0,
            &mut out.data,
            cols,
        );
    } else {
        let mut buf = Vec::new();
        for b in 0..n {
            for rows in row_bands(h, w, kk) {
                let px = rows.len() * w;
                buf.resize(kk * px, 0.0);
                im2col(x, b, rows.clone(), k, &mut buf);
                let dst = &mut out.data[b * hw + rows.start * w..];
                sgemm(
                    cout,
                    kk,
                    px,
                    weight,
                    (kk as isize, 1),
                    &buf,
                    (px as isize, 1),
                    0.0,
                    dst,
                    cols,
                );
            }
        }
    }
    for (co, chunk) in out.data.chunks_exact_mut(cols).enumerate() {
        let b = bias[co];
        if relu {
            chunk.iter_mut().for_each(|v| *v = (*v + b).max(0.0));
        } else {
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    let cache = keep.then(|| ConvCache {
        input: x.clone(),
        relu_out: relu.then(|| out.data.clone()),
    });
    (out, cache)
}

/// Accumulates parameter gradients into `dweight` / `dbias` and returns the
/// input gradient when `need_input_grad`.
pub fn conv_backward(
    mut grad: Tensor,
    cache: ConvCache,
    weight: &[f32],
    k: usize,
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_input_grad: bool,
) -> Option<Tensor> {
    let x = cache.input;
    let (cin, n, h, w) = x.dims();
    let cout = grad.channels;
    let kk = cin * k * k;
    let hw = h * w;
    let cols = n * hw;
    if let Some(out) = &cache.relu_out {
        for (g, &o) in grad.data.iter_mut().zip(out) {
            if o <= 0.0 {
                *g = 0.0;
            }
        }
    }
    for (co, chunk) in grad.data.chunks_exact(cols).enumerate() {
        dbias[co] += chunk.iter().map(|&g| g as f64).sum::<f64>() as f32;
    }
    if k == 1 {
        // dW += G * X^T, dX = W^T * G
        sgemm(
            cout,
            cols,
            cin,
            &grad.data,
            (cols as isize, 1),
            &x.data,
            (1, cols as isize),
            1.0,
            dweight,
            cin,
        );
        if !need_input_grad {
            return None;
        }
        let mut dx = x;
        sgemm(
            cin,
            cout,
            cols,
            weight,
            (1, cin as isize),
            &grad.data,
            (cols as isize, 1),
            0.0,
            &mut dx.data,
            cols,
        );
        return Some(dx);
    }
    let mut buf = Vec::new();
    let mut dx = need_input_grad.then(|| Tensor::zeros(cin, n, h, w));
    for b in 0..n {
        for rows in row_bands(h, w, kk) {
            let px = rows.len() * w;
            buf.resize(kk * px, 0.0);
            let g = &grad.data[b * hw + rows.start * w..];
            im2col(&x, b, rows.clone(), k, &mut buf);
            // dW += G * col^T
            sgemm(
                cout,
                px,
                kk,
                g,
                (cols as isize, 1),
                &buf,
                (1, px as isize),
                1.0,
                dweight,
                kk,
            );
            if let Some(dx) = dx.as_mut() {
                // dcol = W^T * G
                sgemm(
                    kk,
                    cout,
                    px,
                    weight,
                    (1, kk as isize),
                    g,
                    (cols as isize, 1),
                    0.0,
                    &mut buf,
                    px,
                );
                col2im(&buf, dx, b, rows, k);
            }
        }
    }
    dx
}

/// Position in the input plane selected by each output of a max operation.
pub struct PoolCache {
    pub argmax: Vec<u32>,
    pub in_dims: (usize, usize, usize, usize),
}

/// 2x2 max pooling with stride 2.
pub fn max_pool(x: &Tensor, keep: bool) -> (Tensor, Option<PoolCache>) {
    let (c, n, h, w) = x.dims();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "max_pool needs even sides, got {h}x{w}"
    );
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, n, oh, ow);
    let mut argmax = Vec::with_capacity(if keep { out.data.len() } else { 0 });
    for (p, (src, dst)) in x
        .data
        .chunks_exact(h * w)
        .zip(out.data.chunks_exact_mut(oh * ow))
        .enumerate()
    {
        let _ = p;
        for y in 0..oh {
            for xx in 0..ow {
                let (v, i) = max4(src, w, 2 * y, 2 * xx, 2 * y + 1, 2 * xx + 1);
                dst[y * ow + xx] = v;
                if keep {
                    argmax.push(i as u32);
                }
            }
        }
    }
    let cache = keep.then_some(PoolCache {
        argmax,
        in_dims: (c, n, h, w),
    });
    (out, cache)
}

pub fn max_pool_backward(grad: &Tensor, cache: PoolCache) -> Tensor {
    let (c, n, h, w) = cache.in_dims;
    let mut dx = Tensor::zeros(c, n, h, w);
    let out_plane = grad.plane_len();
    for (p, (g, d)) in grad
        .data
        .chunks_exact(out_plane)
        .zip(dx.data.chunks_exact_mut(h * w))
        .enumerate()
    {
        let arg = &cache.argmax[p * out_plane..(p + 1) * out_plane];
        for (gv, &i) in g.iter().zip(arg) {
            d[i as usize] += gv;
        }
    }
    dx
}

/// Max over the 2x2 block spanned by rows `r0, r1` and columns `c0, c1`;
/// ties keep the first cell in row-major order.
#[inline]
fn max4(src: &[f32], w: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> (f32, usize) {
    let mut best = (src[r0 * w + c0], r0 * w + c0);
    for i in [r0 * w + c1, r1 * w + c0, r1 * w + c1] {
        if src[i] > best.0 {
            best = (src[i], i);
        }
    }
    best
}

/// Anti-aliased downsampling: 2x2 max filter with stride 1 (the trailing
/// edge reflected), 3x3 binomial blur, then subsampling with stride 2.
/// Only the blurred values at even positions are evaluated.
pub fn max_blur_pool(x: &Tensor, keep: bool) -> (Tensor, Option<PoolCache>) {
    let (c, n, h, w) = x.dims();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "max_blur_pool needs even sides, got {h}x{w}"
    );
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, n, oh, ow);
    let mut argmax_all = Vec::with_capacity(if keep { x.data.len() } else { 0 });
    let mut maxed = vec![0.0f32; h * w];
    let mut arg = vec![0u32; h * w];
    for (src, dst) in x
        .data
        .chunks_exact(h * w)
        .zip(out.data.chunks_exact_mut(oh * ow))
    {
        for y in 0..h {
            let y1 = reflect_index(y as isize + 1, h);
            for xx in 0..w {
                let x1 = reflect_index(xx as isize + 1, w);
                let (v, i) = max4(src, w, y, xx, y1, x1);
                maxed[y * w + xx] = v;
                arg[y * w + xx] = i as u32;
            }
        }
        for oy in 0..oh {
            let rows = blur_taps(2 * oy, h);
            for ox in 0..ow {
                let cols = blur_taps(2 * ox, w);
                let row_sum = |r: usize| {
                    let line = &maxed[r * w..(r + 1) * w];
                    (line[cols[0]] + line[cols[2]]) + 2.0 * line[cols[1]]
                };
                dst[oy * ow + ox] =
                    ((row_sum(rows[0]) + row_sum(rows[2])) + 2.0 * row_sum(rows[1])) * (1.0 / 16.0);
            }
        }
        if keep {
            argmax_all.extend_from_slice(&arg);
        }
    }
    let cache = keep.then_some(PoolCache {
        argmax: argmax_all,
        in_dims: (c, n, h, w),
    });
    (out, cache)
}

/// Reflected indices `i - 1, i, i + 1`.
#[inline]
fn blur_taps(i: usize, n: usize) -> [usize; 3] {
    [
        reflect_index(i as isize - 1, n),
        i,
        reflect_index(i as isize + 1, n),
    ]
}

pub fn max_blur_pool_backward(grad: &Tensor, cache: PoolCache) -> Tensor {
    let (c, n, h, w) = cache.in_dims;
    let (oh, ow) = (h / 2, w / 2);
    let k = blur_kernel();
    let mut dx = Tensor::zeros(c, n, h, w);
    let mut dmax = vec![0.0f32; h * w];
    for (p, (g, d)) in grad
        .data
        .chunks_exact(oh * ow)
        .zip(dx.data.chunks_exact_mut(h * w))
        .enumerate()
    {
        dmax.iter_mut().for_each(|v| *v = 0.0);
        for oy in 0..oh {
            let rows = blur_taps(2 * oy, h);
            for ox in 0..ow {
                let cols = blur_taps(2 * ox, w);
                let gv = g[oy * ow + ox];
                for (a, &r) in rows.iter().enumerate() {
                    for (b, &cc) in cols.iter().enumerate() {
                        dmax[r * w + cc] += k[a][b] * gv;
                    }
                }
            }
        }
        let arg = &cache.argmax[p * h * w..(p + 1) * h * w];
        for (gv, &i) in dmax.iter().zip(arg) {
            d[i as usize] += gv;
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (c, n, h, w) = x.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(c, n, oh, ow);
    for (src, dst) in x
        .data
        .chunks_exact(h * w)
        .zip(out.data.chunks_exact_mut(oh * ow))
    {
        for y in 0..oh {
            let s = &src[(y / 2) * w..(y / 2 + 1) * w];
            let d = &mut dst[y * ow..(y + 1) * ow];
            for (xx, v) in d.iter_mut().enumerate() {
                *v = s[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let (c, n, oh, ow) = grad.dims();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(c, n, h, w);
    for (g, d) in grad
        .data
        .chunks_exact(oh * ow)
        .zip(dx.data.chunks_exact_mut(h * w))
    {
        for y in 0..oh {
            for xx in 0..ow {
                d[(y / 2) * w + xx / 2] += g[y * ow + xx];
            }
        }
    }
    dx
}
