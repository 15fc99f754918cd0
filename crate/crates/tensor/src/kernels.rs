//! Forward kernels and their vector-Jacobian products.
//!
//! Every kernel works on channels-last maps and is deterministic: loops run
//! in a fixed order and reductions never depend on thread scheduling.

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn check_window(window: (usize, usize)) -> Result<()> {
    let (dh, dw) = window;
    if dh == 0 || dw == 0 || dh % 2 == 0 || dw % 2 == 0 {
        return invalid(format!("pooling window {dh}x{dw} must have odd positive extents"));
    }
    Ok(())
}

/// Zero-padded box sum along one spatial axis, window `2r+1`.
fn box_sum_axis<T: Real>(src: &[T], h: usize, w: usize, c: usize, r: usize, vertical: bool) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let (outer, inner, step) = if vertical { (w, h, w * c) } else { (h, w, c) };
    for o in 0..outer {
        let base = if vertical { o * c } else { o * w * c };
        for ch in 0..c {
            // running sum over [i - r, i + r]
            let mut acc = T::zero();
            for j in 0..r.min(inner.saturating_sub(1)) + 1 {
                if j < inner {
                    acc += src[base + j * step + ch];
                }
            }
            for i in 0..inner {
                out[base + i * step + ch] = acc;
                let add = i + r + 1;
                if add < inner {
                    acc += src[base + add * step + ch];
                }
                if i >= r {
                    acc -= src[base + (i - r) * step + ch];
                }
            }
        }
    }
    out
}

/// Mean over a `d_h x d_w` window with zero padding; output keeps the input size.
///
/// The divisor is always the full window area, padded cells included.
pub fn avg_pool<T: Real>(x: &Tensor<T>, window: (usize, usize)) -> Result<Tensor<T>> {
    check_window(window)?;
    if x.rank() != 3 {
        return invalid(format!("avg_pool expects HxWxC, got {:?}", x.shape()));
    }
    let (h, w, c) = x.hwc()?;
    let (dh, dw) = window;
    let rows = box_sum_axis(x.data(), h, w, c, dw / 2, false);
    let mut both = box_sum_axis(&rows, h, w, c, dh / 2, true);
    let area = T::of((dh * dw) as f64);
    both.iter_mut().for_each(|v| *v /= area);
    Tensor::new(x.shape().to_vec(), both)
}

/// The zero-padded centred box filter is self-adjoint.
pub fn avg_pool_backward<T: Real>(grad: &Tensor<T>, window: (usize, usize)) -> Result<Tensor<T>> {
    avg_pool(grad, window)
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    l0: f64,
    l1: f64,
}

/// Half-pixel (align-corners-false) source taps for one axis.
fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                l0: 1.0 - l1,
                l1,
            }
        })
        .collect()
}

fn resized_shape(shape: &[usize], target: (usize, usize)) -> Vec<usize> {
    let mut out = shape.to_vec();
    out[0] = target.0;
    out[1] = target.1;
    out
}

/// Bilinear resampling of an `H x W` or `H x W x C` map.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    if target.0 == 0 || target.1 == 0 {
        return invalid(format!("resize target {target:?} must be positive"));
    }
    let (h, w, c) = x.hwc()?;
    if (h, w) == target {
        return Ok(x.clone());
    }
    let ty = resize_taps(h, target.0);
    let tx = resize_taps(w, target.1);
    let src = x.data();
    let mut out = Vec::with_capacity(target.0 * target.1 * c);
    for ay in &ty {
        for ax in &tx {
            let w00 = T::of(ay.l0 * ax.l0);
            let w01 = T::of(ay.l0 * ax.l1);
            let w10 = T::of(ay.l1 * ax.l0);
            let w11 = T::of(ay.l1 * ax.l1);
            let p00 = (ay.i0 * w + ax.i0) * c;
            let p01 = (ay.i0 * w + ax.i1) * c;
            let p10 = (ay.i1 * w + ax.i0) * c;
            let p11 = (ay.i1 * w + ax.i1) * c;
            for ch in 0..c {
                out.push(
                    w00 * src[p00 + ch] + w01 * src[p01 + ch] + w10 * src[p10 + ch] + w11 * src[p11 + ch],
                );
            }
        }
    }
    Tensor::new(resized_shape(x.shape(), target), out)
}

pub fn bilinear_resize_backward<T: Real>(grad: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[0], input_shape[1]);
    let (oh, ow, c) = grad.hwc()?;
    if (h, w) == (oh, ow) {
        return Ok(grad.clone());
    }
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut gx = vec![T::zero(); h * w * c];
    let g = grad.data();
    for (oy, ay) in ty.iter().enumerate() {
        for (ox, ax) in tx.iter().enumerate() {
            let base = (oy * ow + ox) * c;
            let taps = [
                (ay.i0, ax.i0, ay.l0 * ax.l0),
                (ay.i0, ax.i1, ay.l0 * ax.l1),
                (ay.i1, ax.i0, ay.l1 * ax.l0),
                (ay.i1, ax.i1, ay.l1 * ax.l1),
            ];
            for (sy, sx, wt) in taps {
                let wt = T::of(wt);
                let dst = (sy * w + sx) * c;
                for ch in 0..c {
                    gx[dst + ch] += wt * g[base + ch];
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|o| {
            let start = o * input / output;
            let end = ((o + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// Adaptive average pooling to a fixed `H' x W'` grid.
pub fn adaptive_avg_pool<T: Real>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    if target.0 == 0 || target.1 == 0 {
        return invalid(format!("adaptive pool target {target:?} must be positive"));
    }
    let (h, w, c) = x.hwc()?;
    if (h, w) == target {
        return Ok(x.clone());
    }
    let by = adaptive_bins(h, target.0);
    let bx = adaptive_bins(w, target.1);
    let src = x.data();
    let mut out = Vec::with_capacity(target.0 * target.1 * c);
    for &(y0, y1) in &by {
        for &(x0, x1) in &bx {
            let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
            for ch in 0..c {
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[(y * w + xx) * c + ch];
                    }
                }
                out.push(acc / count);
            }
        }
    }
    Tensor::new(resized_shape(x.shape(), target), out)
}

pub fn adaptive_avg_pool_backward<T: Real>(grad: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[0], input_shape[1]);
    let (oh, ow, c) = grad.hwc()?;
    if (h, w) == (oh, ow) {
        return Ok(grad.clone());
    }
    let by = adaptive_bins(h, oh);
    let bx = adaptive_bins(w, ow);
    let g = grad.data();
    let mut gx = vec![T::zero(); h * w * c];
    for (oy, &(y0, y1)) in by.iter().enumerate() {
        for (ox, &(x0, x1)) in bx.iter().enumerate() {
            let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
            for ch in 0..c {
                let share = g[(oy * ow + ox) * c + ch] / count;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        gx[(y * w + xx) * c + ch] += share;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector is (near) zero.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return invalid(format!("cosine of vectors with lengths {} and {}", a.len(), b.len()));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < T::eps_norm() || nb < T::eps_norm() {
        return Ok(T::zero());
    }
    Ok(dot(a, b) / (na * nb))
}

/// `(x - min) / (max - min)`; all zeros when the range is degenerate.
pub fn minmax_normalize<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.is_empty() {
        return invalid("minmax_normalize of an empty tensor");
    }
    let lo = x.min();
    let hi = x.max();
    let range = hi - lo;
    if range < T::eps_norm() {
        return Ok(Tensor::zeros(x.shape()));
    }
    Ok(x.map(|v| ((v - lo) / range).max(T::zero()).min(T::one())))
}

/// Max-shifted softmax of one vector.
pub fn softmax<T: Real>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return invalid("softmax of an empty vector");
    }
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().expect("non-empty shape");
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        out.extend(softmax(row)?);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *y.shape().last().expect("non-empty shape");
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(n).zip(grad.data().chunks(n)) {
        let inner = dot(yr, gr);
        out.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - inner)));
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Plain `m x k` by `k x n` product.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
        _ => return invalid(format!("matmul shapes {:?} x {:?}", a.shape(), b.shape())),
    };
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, n] = *a.shape() else {
        return invalid(format!("transpose expects a matrix, got {:?}", a.shape()));
    };
    let src = a.data();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(src[i * n + j]);
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Convolution kernel geometry: `k x k x C_in x C_out`.
fn conv_geometry<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 3 {
        return invalid(format!("conv2d expects HxWxC input, got {:?}", x.shape()));
    }
    let (h, w, cin) = x.hwc()?;
    let [k, k2, kin, cout] = *kernel.shape() else {
        return invalid(format!("conv2d kernel must be k x k x Cin x Cout, got {:?}", kernel.shape()));
    };
    if k != k2 || k % 2 == 0 {
        return invalid(format!("conv2d kernel must be square with odd extent, got {k}x{k2}"));
    }
    if kin != cin {
        return invalid(format!("conv2d channel mismatch: input has {cin}, kernel expects {kin}"));
    }
    Ok((h, w, cin, k, cout))
}

/// Patch matrix `HW x (k*k*C_in)` in `(ky, kx, c)` order, zero outside the map.
fn im2col<T: Real>(x: &[T], h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let r = k / 2;
    let cols = k * k * c;
    let mut col = vec![T::zero(); h * w * cols];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col[(y * w + xx) * cols..(y * w + xx + 1) * cols];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let r = k / 2;
    let cols = k * k * c;
    let mut x = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &col[(y * w + xx) * cols..(y * w + xx + 1) * cols];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = (ky * k + kx) * c;
                    for ch in 0..c {
                        x[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 cross-correlation with `(k-1)/2` zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (h, w, cin, k, cout) = conv_geometry(x, kernel)?;
    let mut out = vec![T::zero(); h * w * cout];
    if let Some(b) = bias {
        if b.len() != cout {
            return invalid(format!("conv2d bias has {} values for {cout} outputs", b.len()));
        }
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if k == 1 {
        T::gemm(h * w, cin, cout, x.data(), false, kernel.data(), false, beta, &mut out);
    } else {
        let col = im2col(x.data(), h, w, cin, k);
        T::gemm(h * w, k * k * cin, cout, &col, false, kernel.data(), false, beta, &mut out);
    }
    Tensor::new(vec![h, w, cout], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w, cin, k, cout) = conv_geometry(x, kernel)?;
    let hw = h * w;
    let kk = k * k * cin;
    let g = grad.data();

    let mut gb = vec![T::zero(); cout];
    for row in g.chunks(cout) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }

    let mut gw = vec![T::zero(); kk * cout];
    let gx = if k == 1 {
        T::gemm(kk, hw, cout, x.data(), true, g, false, T::zero(), &mut gw);
        let mut gx = vec![T::zero(); hw * cin];
        T::gemm(hw, cout, cin, g, false, kernel.data(), true, T::zero(), &mut gx);
        gx
    } else {
        let col = im2col(x.data(), h, w, cin, k);
        T::gemm(kk, hw, cout, &col, true, g, false, T::zero(), &mut gw);
        let mut gcol = vec![T::zero(); hw * kk];
        T::gemm(hw, cout, kk, g, false, kernel.data(), true, T::zero(), &mut gcol);
        col2im(&gcol, h, w, cin, k)
    };
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gw)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

/// Concatenate along the last axis; all leading extents must agree.
pub fn concat_last<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return invalid("concat of zero tensors");
    };
    let lead = &first.shape()[..first.rank() - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if &p.shape()[..p.rank() - 1] != lead {
            return invalid(format!(
                "concat leading shapes differ: {:?} vs {:?}",
                first.shape(),
                p.shape()
            ));
        }
        widths.push(*p.shape().last().expect("non-empty shape"));
    }
    let rows: usize = lead.iter().product();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &wd) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * wd..(r + 1) * wd]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, out)
}

/// Inverse of [`concat_last`]: slices a gradient back into per-part blocks.
pub fn split_last<T: Real>(grad: &Tensor<T>, shapes: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
    let total = *grad.shape().last().expect("non-empty shape");
    let rows = grad.len() / total;
    let mut outs: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for r in 0..rows {
        let row = &grad.data()[r * total..(r + 1) * total];
        let mut off = 0;
        for (o, s) in outs.iter_mut().zip(shapes) {
            let wd = *s.last().expect("non-empty shape");
            o.extend_from_slice(&row[off..off + wd]);
            off += wd;
        }
    }
    outs.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::new(s.clone(), d))
        .collect()
}

/// Folds each `f x f` spatial block into channels: `H x W x C -> H/f x W/f x f*f*C`.
pub fn space_to_depth<T: Real>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return invalid(format!("space_to_depth factor {f} must divide {h}x{w}"));
    }
    let (oh, ow, oc) = (h / f, w / f, f * f * c);
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    for y in 0..oh {
        for xx in 0..ow {
            for dy in 0..f {
                for dx in 0..f {
                    let p = ((y * f + dy) * w + xx * f + dx) * c;
                    out.extend_from_slice(&src[p..p + c]);
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, oc], out)
}

pub fn depth_to_space<T: Real>(x: &Tensor<T>, f: usize, c: usize) -> Result<Tensor<T>> {
    let (oh, ow, oc) = x.hwc()?;
    if oc != f * f * c {
        return invalid(format!("depth_to_space: {oc} channels is not {f}*{f}*{c}"));
    }
    let (h, w) = (oh * f, ow * f);
    let src = x.data();
    let mut out = vec![T::zero(); h * w * c];
    let mut i = 0;
    for y in 0..oh {
        for xx in 0..ow {
            for dy in 0..f {
                for dx in 0..f {
                    let p = ((y * f + dy) * w + xx * f + dx) * c;
                    out[p..p + c].copy_from_slice(&src[i..i + c]);
                    i += c;
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}
