//! Loop oracles and fixtures shared by the integration tests.
//!
//! Every oracle here recomputes a quantity straight from its definition with
//! plain loops in f64; none of them calls into the crate under test.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use symnet::config::Config;
use symnet::data::{Episode, SupportShot};
use symnet::Tensor;
use symnet_tensor::oracle;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random binary `h x w` mask with at least one cell of each value.
pub fn binary_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Tensor<f64> {
    loop {
        let m = Tensor::from_fn(&[h, w], |_| if rng.random_bool(p) { 1.0 } else { 0.0 });
        let on = m.data().iter().filter(|&&v| v == 1.0).count();
        if on > 0 && on < h * w {
            return m;
        }
    }
}

/// Bilinear resize then `>= 0.5`, via the tensor crate's loop oracle.
pub fn binarize(mask: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let m = mask.clone().reshape(&[mask.shape()[0], mask.shape()[1], 1]).unwrap();
    let r = oracle::bilinear_resize(&m, (h, w));
    Tensor::new(vec![h, w], r.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()).unwrap()
}

pub fn pixel(x: &Tensor<f64>, p: usize) -> Vec<f64> {
    let c = x.shape()[2];
    x.data()[p * c..(p + 1) * c].to_vec()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Prior mask by definition: masked window means, the full `HW x HW` score
/// matrix, row means, per-window min-max, then the mean over windows.
pub fn prior_mask(support: &Tensor<f64>, query: &Tensor<f64>, mask: &Tensor<f64>, windows: &[(usize, usize)]) -> Tensor<f64> {
    let (h, w, c) = (support.shape()[0], support.shape()[1], support.shape()[2]);
    let m = mask.clone().reshape(&[mask.shape()[0], mask.shape()[1], 1]).unwrap();
    let m = oracle::bilinear_resize(&m, (h, w));
    let mut masked = support.clone();
    for p in 0..h * w {
        for ch in 0..c {
            masked.data_mut()[p * c + ch] *= m.data()[p];
        }
    }
    let n = h * w;
    let mut acc = vec![0.0; n];
    for &win in windows {
        let rs = oracle::avg_pool(&masked, win);
        let rq = oracle::avg_pool(query, win);
        let mut row_means = vec![0.0; n];
        for (i, slot) in row_means.iter_mut().enumerate() {
            let q = pixel(&rq, i);
            let omega: f64 = q.iter().map(|v| v * v).sum();
            let mut s = 0.0;
            for j in 0..n {
                s += oracle::cosine(&q, &pixel(&rs, j)) * omega;
            }
            *slot = s / n as f64;
        }
        for (a, v) in acc.iter_mut().zip(oracle::minmax(&row_means)) {
            *a += v;
        }
    }
    Tensor::new(vec![h, w], acc.iter().map(|a| a / windows.len() as f64).collect()).unwrap()
}

/// Max over foreground support positions of the clamped cosine, per query position.
pub fn block_correlation(query: &Tensor<f64>, support: &Tensor<f64>, fg: &Tensor<f64>) -> Vec<f64> {
    let n = fg.len();
    (0..n)
        .map(|i| {
            let q = pixel(query, i);
            let mut best = 0.0f64;
            for j in 0..n {
                if fg.data()[j] > 0.0 {
                    best = best.max(oracle::cosine(&q, &pixel(support, j)).clamp(0.0, 1.0));
                }
            }
            best
        })
        .collect()
}

/// One hinge term of the joint triplet loss.
pub fn hinge(anchor: &[f64], plus: &[f64], minus: &[f64]) -> f64 {
    (dist(anchor, plus) + 0.5 - dist(anchor, minus)).max(0.0)
}

/// Explicit single-head attention: `FFN(softmax(q k^T / s) v) + p`.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    p: &[f64],
    t: &[f64],
    weighted: &Tensor<f64>,
    w_q: &Tensor<f64>,
    w_k: &Tensor<f64>,
    w_v: &Tensor<f64>,
    ffn: [(&Tensor<f64>, &Tensor<f64>); 2],
    scale: f64,
) -> Vec<f64> {
    let c = p.len();
    let pt: Vec<f64> = p.iter().chain(t).copied().collect();
    let cm = weighted.shape()[2];
    let n = weighted.len() / cm;
    let proj = |w: &Tensor<f64>, x: &[f64], cols: usize| -> Vec<f64> {
        (0..cols).map(|j| x.iter().enumerate().map(|(i, v)| v * w.data()[i * cols + j]).sum()).collect()
    };
    let q = proj(w_q, &pt, c);
    let keys: Vec<Vec<f64>> = (0..n).map(|i| proj(w_k, &pixel(weighted, i), c)).collect();
    let values: Vec<Vec<f64>> = (0..n).map(|i| proj(w_v, &pixel(weighted, i), c)).collect();
    let logits: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale).collect();
    let attn = oracle::softmax(&logits);
    let mut ctx = vec![0.0; c];
    for (a, v) in attn.iter().zip(&values) {
        for (o, x) in ctx.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    let [(w1, b1), (w2, b2)] = ffn;
    let hidden: Vec<f64> = proj(w1, &ctx, b1.len()).iter().zip(b1.data()).map(|(x, b)| (x + b).max(0.0)).collect();
    proj(w2, &hidden, c).iter().zip(b2.data()).zip(p).map(|((x, b), p)| x + b + p).collect()
}

/// Small network for finite-difference and equivalence checks: 32px images,
/// an 8x8 feature grid, so the decoder branches run at 8, 4, 2 and 1.
pub fn tiny_config() -> Config {
    Config {
        image_size: 32,
        n_classes: 8,
        n_folds: 4,
        stem_channels: 3,
        c_low: 4,
        c_mid: 5,
        c_high: 6,
        n1: 1,
        n2: 2,
        n3: 2,
        d_text: 3,
        ffn_mult: 2,
        n_prime: 3,
        decoder_width: 3,
        precision: symnet::config::Precision::F64,
        ..Config::default()
    }
}

/// Episode with the given support shot repeated `k` times.
pub fn repeat_support(ep: &Episode<f64>, k: usize) -> Episode<f64> {
    let shot: &SupportShot<f64> = &ep.supports[0];
    Episode {
        supports: vec![shot.clone(); k],
        ..ep.clone()
    }
}
