//! Raw numeric kernels used by the tape ops. Parallel loops write to
//! disjoint output slots and reduce partial results in a fixed order, so the
//! results do not depend on thread scheduling.

use rayon::prelude::*;

use crate::tensor::Real;

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d = *d + s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d = *d + s),
                    }
                }
            }
        }
    }
}

/// Same-padded 3×3 cross-correlation. `x` is `[batch, c, h, w]`, `weight`
/// is `[o, c, 3, 3]`; the result is `[batch, o, h, w]`.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    (batch, c, h, w): (usize, usize, usize, usize),
    weight: &[T],
    o: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); batch * o * hw];
    out.par_chunks_mut(o * hw).enumerate().for_each(|(b, out_b)| {
        let mut cols = vec![T::zero(); c * 9 * hw];
        im2col(&x[b * c * hw..(b + 1) * c * hw], c, h, w, &mut cols);
        T::gemm(o, c * 9, hw, weight, false, &cols, false, out_b, false);
    });
    let _ = batch;
    out
}

/// Adjoints of [`conv2d_forward`]: `(dx, dweight)`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    (batch, c, h, w): (usize, usize, usize, usize),
    weight: &[T],
    o: usize,
    g: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = h * w;
    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let g_b = &g[b * o * hw..(b + 1) * o * hw];
            let dw = need_dw.then(|| {
                let mut cols = vec![T::zero(); c * 9 * hw];
                im2col(&x[b * c * hw..(b + 1) * c * hw], c, h, w, &mut cols);
                let mut dw = vec![T::zero(); o * c * 9];
                T::gemm(o, hw, c * 9, g_b, false, &cols, true, &mut dw, false);
                dw
            });
            let dx = need_dx.then(|| {
                let mut dcols = vec![T::zero(); c * 9 * hw];
                T::gemm(c * 9, o, hw, weight, true, g_b, false, &mut dcols, false);
                let mut dx = vec![T::zero(); c * hw];
                col2im(&dcols, c, h, w, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();
    let mut dx_all = need_dx.then(|| Vec::with_capacity(batch * c * hw));
    let mut dw_all = need_dw.then(|| vec![T::zero(); o * c * 9]);
    for (dx, dw) in per_item {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, &d)| *a = *a + d);
        }
    }
    (dx_all, dw_all)
}

/// 2×2 average pooling with stride 2 over the last two axes, flooring odd
/// extents. `planes` is the product of the leading axes.
pub fn avg_pool2d_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..];
        let dst = &mut out[p * oh * ow..];
        for y in 0..oh {
            for xx in 0..ow {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = s * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2d_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let gv = g[p * oh * ow + y * ow + xx] * quarter;
                let base = p * h * w;
                for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dxo;
                    dx[i] = dx[i] + gv;
                }
            }
        }
    }
}

/// 2×2 max pooling; returns the pooled values and the flat source index of
/// each maximum.
pub(crate) fn max_pool2d_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dxo) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dxo;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Numerically stable softmax over the middle extent of an
/// `(outer, len, inner)` view.
pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum = sum + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    out
}

/// Row-major strides of `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `x` with its axes reordered so that output axis `k` is input
/// axis `perm[k]`.
pub(crate) fn permute_data<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}
