//! Naive reference implementations and a finite-difference gradient checker.
//!
//! Nothing here shares code with the kernels it checks: every routine is a
//! direct loop over the defining formula. Compiled only with the `oracle`
//! feature, which test targets enable.

use crate::{Result, Tape, Tensor, Var};

fn at(x: &Tensor<f64>, y: isize, xx: isize, c: usize) -> f64 {
    let s = x.shape();
    let (h, w, ch) = (s[0] as isize, s[1] as isize, if s.len() == 3 { s[2] } else { 1 });
    if y < 0 || xx < 0 || y >= h || xx >= w {
        return 0.0;
    }
    x.data()[((y * w + xx) as usize) * ch + c]
}

/// Zero-padded window mean, one output cell at a time.
pub fn avg_pool(x: &Tensor<f64>, window: (usize, usize)) -> Tensor<f64> {
    let s = x.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (rh, rw) = ((window.0 / 2) as isize, (window.1 / 2) as isize);
    let area = (window.0 * window.1) as f64;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for xx in 0..w as isize {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -rh..=rh {
                    for dx in -rw..=rw {
                        acc += at(x, y + dy, xx + dx, ch);
                    }
                }
                out.push(acc / area);
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// Half-pixel bilinear sampling evaluated per output cell.
pub fn bilinear_resize(x: &Tensor<f64>, target: (usize, usize)) -> Tensor<f64> {
    let s = x.shape();
    let (h, w) = (s[0], s[1]);
    let c = if s.len() == 3 { s[2] } else { 1 };
    let coord = |o: usize, input: usize, output: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::new();
    for oy in 0..target.0 {
        let (y0, y1, fy) = coord(oy, h, target.0);
        for ox in 0..target.1 {
            let (x0, x1, fx) = coord(ox, w, target.1);
            for ch in 0..c {
                let v = |y: usize, xx: usize| at(x, y as isize, xx as isize, ch);
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    let mut shape = s.to_vec();
    shape[0] = target.0;
    shape[1] = target.1;
    Tensor::new(shape, out).unwrap()
}

/// Six nested loops: output row, column, channel, kernel row, column, input channel.
pub fn conv2d(x: &Tensor<f64>, kernel: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Tensor<f64> {
    let s = x.shape();
    let (h, w, cin) = (s[0], s[1], s[2]);
    let k = kernel.shape()[0];
    let cout = kernel.shape()[3];
    let r = (k / 2) as isize;
    let kw = |ky: usize, kx: usize, ci: usize, co: usize| kernel.data()[((ky * k + kx) * cin + ci) * cout + co];
    let mut out = Vec::new();
    for y in 0..h as isize {
        for xx in 0..w as isize {
            for co in 0..cout {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for ky in 0..k {
                    for kx in 0..k {
                        for ci in 0..cin {
                            acc += at(x, y + ky as isize - r, xx + kx as isize - r, ci) * kw(ky, kx, ci, co);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![h, w, cout], out).unwrap()
}

pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na.sqrt() < 1e-8 || nb.sqrt() < 1e-8 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
    x.iter().map(|v| (v - m).exp() / z).collect()
}

pub fn minmax(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().cloned().fold(f64::MAX, f64::min);
    let hi = x.iter().cloned().fold(f64::MIN, f64::max);
    if hi - lo < 1e-8 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that vanishing
/// gradients are compared absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central-difference check of `build` with respect to every element of every input.
///
/// `build` must record a scalar loss on the tape from the provided input vars.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars = vals
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|v| tape.leaf(v.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
