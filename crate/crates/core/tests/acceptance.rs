//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 3 7`.
//! Exits non-zero when any selected criterion fails.

mod common;

use std::error::Error;
use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symnet::apa::{self, PrototypeBundle};
use symnet::checkpoint::Checkpoint;
use symnet::config::{Config, CorrReduce, Precision, SelfActivation};
use symnet::data::{sample_episode, Dataset, Episode, Mode, SplitConfig};
use symnet::encoder::FeaturePyramid;
use symnet::eval::{evaluate, EvalOptions};
use symnet::fusion::{self, PredictionSet};
use symnet::model::{Guidance, SymNet};
use symnet::spm;
use symnet::tdc;
use symnet::train::{train_to_dir, StepMetrics, Trainer};
use symnet::Tensor;
use symnet_tensor::oracle::{self, grad_check, rel_error};
use symnet_tensor::{kernels, Tape, Var};

use common::*;

type Res<T> = Result<T, Box<dyn Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Res<Outcome> {
    Ok(Outcome { pass, detail })
}

const KERNEL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    type Criterion = (usize, &'static str, f64, fn() -> Res<Outcome>);
    let criteria: [Criterion; 12] = [
        (1, "kernel oracles", 30.0, kernel_oracles),
        (2, "gradient suite", 120.0, gradient_suite),
        (3, "prior mask brute force", f64::INFINITY, spm_brute_force),
        (4, "self-matching prior", f64::INFINITY, self_matching),
        (5, "alignment symmetry", f64::INFINITY, apa_symmetry),
        (6, "triplet loss contract", f64::INFINITY, triplet_contract),
        (7, "hyper-correlation", f64::INFINITY, tdc_equivalence),
        (8, "K-shot identity", f64::INFINITY, kshot_identity),
        (9, "overfit one episode", 300.0, overfit),
        (10, "generalization smoke test", 1800.0, generalization),
        (11, "persistence", f64::INFINITY, persistence),
        (12, "determinism", f64::INFINITY, determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match result {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panic: {msg}"))
            }
        };
        if secs > budget {
            pass = false;
            detail.push_str(&format!("; over the {budget:.0}s budget"));
        }
        if !pass {
            failed += 1;
        }
        println!("{} [{n:>2}] {name}: {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- kernels

/// Value rounded to f32 and back, so both sides see identical inputs.
fn grid(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    uniform(rng, shape, lo, hi).cast::<f32>().cast()
}

fn diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.max_abs_diff(b)
}

fn run32(x: &Tensor<f64>, f: impl Fn(&Tensor<f32>) -> symnet_tensor::Result<Tensor<f32>>) -> Tensor<f64> {
    f(&x.cast()).expect("kernel").cast()
}

fn adaptive_pool_oracle(x: &Tensor<f64>, target: (usize, usize)) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let bin = |o: usize, input: usize, out: usize| {
        let lo = ((o * input) as f64 / out as f64).floor() as usize;
        let hi = (((o + 1) * input) as f64 / out as f64).ceil() as usize;
        (lo, hi)
    };
    let mut out = Vec::new();
    for oy in 0..target.0 {
        let (y0, y1) = bin(oy, h, target.0);
        for ox in 0..target.1 {
            let (x0, x1) = bin(ox, w, target.1);
            for ch in 0..c {
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x.data()[(y * w + xx) * c + ch];
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new(vec![target.0, target.1, c], out).unwrap()
}

fn space_to_depth_oracle(x: &Tensor<f64>, f: usize) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let oc = ((y % f) * f + xx % f) * c + ch;
                out[((y / f) * ow + xx / f) * (f * f * c) + oc] = x.data()[(y * w + xx) * c + ch];
            }
        }
    }
    Tensor::new(vec![oh, ow, f * f * c], out).unwrap()
}

fn concat_oracle(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let n = parts[0].len() / parts[0].shape()[2];
    let mut out = Vec::new();
    for p in 0..n {
        for t in parts {
            out.extend(pixel(t, p));
        }
    }
    let width = parts.iter().map(|t| t.shape()[2]).sum();
    Tensor::new(vec![parts[0].shape()[0], parts[0].shape()[1], width], out).unwrap()
}

fn cross_entropy_oracle(logits: &Tensor<f64>, target: &[usize]) -> f64 {
    let k = *logits.shape().last().unwrap();
    let mut total = 0.0;
    for (r, &t) in target.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        total -= oracle::softmax(row)[t].ln();
    }
    total / target.len() as f64
}

/// Forward ops recorded on a 32-bit gradient-free tape.
fn tape32(inputs: &[&Tensor<f64>], f: impl for<'t> Fn(&mut Tape<'t, f32>, &[Var]) -> symnet_tensor::Result<Var>) -> Tensor<f64> {
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.cast()).unwrap()).collect();
    let out = f(&mut tape, &vars).expect("tape op");
    tape.value(out).cast()
}

fn kernel_oracles() -> Res<Outcome> {
    const CASES: usize = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut stats: Vec<(&str, usize, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match stats.iter_mut().find(|s| s.0 == name) {
        Some(s) => {
            s.1 += 1;
            s.2 = s.2.max(e);
        }
        None => stats.push((name, 1, e)),
    };
    let odd = [1usize, 3, 5, 7];
    for _ in 0..CASES {
        let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let x = grid(&mut rng, &[h, w, c], -1.0, 1.0);

        let win = (odd[rng.random_range(0..4)], odd[rng.random_range(0..4)]);
        record("avg_pool", diff(&run32(&x, |t| kernels::avg_pool(t, win)), &oracle::avg_pool(&x, win)));

        let target = (rng.random_range(1..=8), rng.random_range(1..=8));
        record(
            "bilinear_resize",
            diff(&run32(&x, |t| kernels::bilinear_resize(t, target)), &oracle::bilinear_resize(&x, target)),
        );

        let small = (rng.random_range(1..=h), rng.random_range(1..=w));
        record(
            "adaptive_avg_pool",
            diff(&run32(&x, |t| kernels::adaptive_avg_pool(t, small)), &adaptive_pool_oracle(&x, small)),
        );

        let k = [1usize, 3, 5][rng.random_range(0..3)];
        let cout = rng.random_range(1..=8);
        let kern = grid(&mut rng, &[k, k, c, cout], -1.0, 1.0);
        let bias = grid(&mut rng, &[cout], -1.0, 1.0);
        let with_bias = rng.random_bool(0.5);
        let got = kernels::conv2d(&x.cast::<f32>(), &kern.cast(), with_bias.then(|| bias.cast()).as_ref())?.cast();
        record("conv2d", diff(&got, &oracle::conv2d(&x, &kern, with_bias.then_some(&bias))));

        let (m, kk, n) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let a = grid(&mut rng, &[m, kk], -1.0, 1.0);
        let b = grid(&mut rng, &[kk, n], -1.0, 1.0);
        let got = kernels::matmul(&a.cast::<f32>(), &b.cast())?.cast();
        record("matmul", diff(&got, &oracle::matmul(&a, &b)));

        let t_or = Tensor::from_fn(&[kk, m], |i| a.data()[(i % m) * kk + i / m]);
        record("transpose", diff(&run32(&a, kernels::transpose), &t_or));

        let u = grid(&mut rng, &[c], -1.0, 1.0);
        let v = grid(&mut rng, &[c], -1.0, 1.0);
        let got = kernels::cosine(&u.cast::<f32>().into_data(), &v.cast::<f32>().into_data())? as f64;
        record("cosine", (got - oracle::cosine(u.data(), v.data())).abs());

        let logits = grid(&mut rng, &[m, n], -4.0, 4.0);
        let rows: Vec<f64> = logits.data().chunks(n).flat_map(oracle::softmax).collect();
        record(
            "softmax_rows",
            diff(&run32(&logits, kernels::softmax_rows), &Tensor::new(vec![m, n], rows)?),
        );

        let mm = Tensor::new(vec![h, w], oracle::minmax(&x.data()[..h * w]))?;
        let flat = Tensor::new(vec![h, w], x.data()[..h * w].to_vec())?;
        record("minmax_normalize", diff(&run32(&flat, kernels::minmax_normalize), &mm));

        let parts: Vec<Tensor<f64>> = (0..rng.random_range(1..=3))
            .map(|_| {
                let ci = rng.random_range(1..=8);
                grid(&mut rng, &[h, w, ci], -1.0, 1.0)
            })
            .collect();
        let p32: Vec<Tensor<f32>> = parts.iter().map(|p| p.cast()).collect();
        let refs: Vec<&Tensor<f32>> = p32.iter().collect();
        record("concat", diff(&kernels::concat_last(&refs)?.cast(), &concat_oracle(&parts)));

        let f = [1usize, 2, 4][rng.random_range(0..3)];
        let (sh, sw) = (f * rng.random_range(1..=8 / f), f * rng.random_range(1..=8 / f));
        let xs = grid(&mut rng, &[sh, sw, c], -1.0, 1.0);
        let s2d = space_to_depth_oracle(&xs, f);
        record("space_to_depth", diff(&run32(&xs, |t| kernels::space_to_depth(t, f)), &s2d));
        record("depth_to_space", diff(&run32(&s2d, |t| kernels::depth_to_space(t, f, c)), &xs));

        let y = grid(&mut rng, &[h, w, c], -1.0, 1.0);
        let ew = |op: fn(f64, f64) -> f64| x.zip_map(&y, op).unwrap();
        record("add", diff(&tape32(&[&x, &y], |t, v| t.add(v[0], v[1])), &ew(|a, b| a + b)));
        record("sub", diff(&tape32(&[&x, &y], |t, v| t.sub(v[0], v[1])), &ew(|a, b| a - b)));
        record("mul", diff(&tape32(&[&x, &y], |t, v| t.mul(v[0], v[1])), &ew(|a, b| a * b)));
        record("scale", diff(&tape32(&[&x], |t, v| t.scale(v[0], 0.37)), &x.map(|a| a * 0.37f32 as f64)));
        record("relu", diff(&tape32(&[&x], |t, v| t.relu(v[0])), &x.map(|a| a.max(0.0))));
        let total: f64 = x.data().iter().sum();
        record("sum", diff(&tape32(&[&x], |t, v| t.sum(v[0])), &Tensor::scalar(total)));
        record("mean", diff(&tape32(&[&x], |t, v| t.mean(v[0])), &Tensor::scalar(total / x.len() as f64)));
        let norm = x.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        record("norm", diff(&tape32(&[&x], |t, v| t.norm(v[0])), &Tensor::scalar(norm)));

        let wts = grid(&mut rng, &[h, w, 1], 0.0, 1.0);
        let spatial = Tensor::from_fn(&[h, w, c], |i| x.data()[i] * wts.data()[i / c]);
        record("mul_spatial", diff(&tape32(&[&x, &wts], |t, v| t.mul_spatial(v[0], v[1])), &spatial));

        let pos: Vec<usize> = (0..h * w).filter(|_| rng.random_bool(0.5)).collect();
        let pos = if pos.is_empty() { vec![0] } else { pos };
        let mut sel = vec![0.0; c];
        for &p in &pos {
            sel.iter_mut().zip(pixel(&x, p)).for_each(|(s, v)| *s += v / pos.len() as f64);
        }
        record("select_mean", diff(&tape32(&[&x], |t, v| t.select_mean(v[0], &pos)), &Tensor::vector(sel)));

        let tiled = Tensor::from_fn(&[h, w, c], |i| u.data()[i % c]);
        record("broadcast_spatial", diff(&tape32(&[&u], |t, v| t.broadcast_spatial(v[0], h, w)), &tiled));

        let target: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        let ce = cross_entropy_oracle(&logits, &target);
        record(
            "softmax_cross_entropy",
            diff(&tape32(&[&logits], |t, v| t.softmax_cross_entropy(v[0], &target)), &Tensor::scalar(ce)),
        );
    }
    let worst = stats.iter().map(|s| s.2).fold(0.0, f64::max);
    let fewest = stats.iter().map(|s| s.1).min().unwrap_or(0);
    let mut detail = format!("{} ops x >= {fewest} cases, max abs error {worst:.2e} (tol {KERNEL_TOL:.0e})", stats.len());
    for (name, _, e) in stats.iter().filter(|s| s.2 > KERNEL_TOL) {
        write!(detail, "; {name} {e:.2e}")?;
    }
    outcome(worst <= KERNEL_TOL && fewest >= 100, detail)
}

// ---------------------------------------------------------------- gradients

fn random64(seed: u64, shape: &[usize]) -> Tensor<f64> {
    uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, -1.0, 1.0)
}

/// Entries bounded away from zero, for checks through kinks at zero.
fn off_zero(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contracts a tensor output with fixed weights into a scalar.
fn probe(tape: &mut Tape<'_, f64>, out: Var) -> symnet_tensor::Result<Var> {
    let w = tape.constant(Tensor::from_fn(tape.shape(out), |i| 0.3 + ((i * 7919) % 17) as f64 / 17.0))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type Build = Box<dyn for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> symnet_tensor::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let r = random64;
    let targets: Vec<usize> = (0..12).map(|i| (i * 5) % 3).collect();
    vec![
        ("add", vec![r(1, &[3, 2, 2]), r(2, &[3, 2, 2])], Box::new(|t, v| {
            let o = t.add(v[0], v[1])?;
            probe(t, o)
        })),
        ("sub", vec![r(3, &[3, 2, 2]), r(4, &[3, 2, 2])], Box::new(|t, v| {
            let o = t.sub(v[0], v[1])?;
            probe(t, o)
        })),
        ("mul", vec![r(5, &[3, 2, 2]), r(6, &[3, 2, 2])], Box::new(|t, v| {
            let o = t.mul(v[0], v[1])?;
            probe(t, o)
        })),
        ("scale", vec![r(7, &[4, 3])], Box::new(|t, v| {
            let o = t.scale(v[0], -1.7)?;
            probe(t, o)
        })),
        ("relu", vec![off_zero(8, &[4, 3, 2])], Box::new(|t, v| {
            let o = t.relu(v[0])?;
            probe(t, o)
        })),
        ("sum/mean/average", vec![r(9, &[3, 3, 2]), r(10, &[3, 3, 2])], Box::new(|t, v| {
            let a = t.average(&[v[0], v[1]])?;
            let p = probe(t, a)?;
            let m = t.mean(v[0])?;
            t.add(p, m)
        })),
        ("reshape", vec![r(11, &[2, 3, 2])], Box::new(|t, v| {
            let o = t.reshape(v[0], &[3, 4])?;
            probe(t, o)
        })),
        ("conv2d 3x3", vec![r(12, &[5, 4, 3]), r(13, &[3, 3, 3, 2]), r(14, &[2])], Box::new(|t, v| {
            let o = t.conv2d(v[0], v[1], Some(v[2]))?;
            probe(t, o)
        })),
        ("conv2d 1x1", vec![r(15, &[4, 4, 3]), r(16, &[1, 1, 3, 4])], Box::new(|t, v| {
            let o = t.conv2d(v[0], v[1], None)?;
            probe(t, o)
        })),
        ("avg_pool", vec![r(17, &[6, 5, 2])], Box::new(|t, v| {
            let o = t.avg_pool(v[0], (5, 3))?;
            probe(t, o)
        })),
        ("bilinear_resize", vec![r(18, &[4, 3, 2])], Box::new(|t, v| {
            let up = t.resize(v[0], (7, 5))?;
            let down = t.resize(v[0], (2, 2))?;
            let a = probe(t, up)?;
            let b = probe(t, down)?;
            t.add(a, b)
        })),
        ("adaptive_pool", vec![r(19, &[7, 5, 2])], Box::new(|t, v| {
            let o = t.adaptive_pool(v[0], (3, 2))?;
            probe(t, o)
        })),
        ("concat", vec![r(20, &[3, 3, 2]), r(21, &[3, 3, 1])], Box::new(|t, v| {
            let o = t.concat(&[v[0], v[1]])?;
            probe(t, o)
        })),
        ("matmul/transpose", vec![r(22, &[3, 4]), r(23, &[5, 4])], Box::new(|t, v| {
            let bt = t.transpose(v[1])?;
            let o = t.matmul(v[0], bt)?;
            probe(t, o)
        })),
        ("softmax_rows", vec![r(24, &[3, 5])], Box::new(|t, v| {
            let o = t.softmax_rows(v[0])?;
            probe(t, o)
        })),
        ("mul_spatial", vec![r(25, &[3, 4, 2]), r(26, &[3, 4, 1])], Box::new(|t, v| {
            let o = t.mul_spatial(v[0], v[1])?;
            probe(t, o)
        })),
        ("select_mean", vec![r(27, &[3, 3, 4])], Box::new(|t, v| {
            let o = t.select_mean(v[0], &[0, 4, 5, 8])?;
            probe(t, o)
        })),
        ("broadcast_spatial", vec![r(28, &[3])], Box::new(|t, v| {
            let o = t.broadcast_spatial(v[0], 2, 3)?;
            probe(t, o)
        })),
        ("norm", vec![r(29, &[5])], Box::new(|t, v| t.norm(v[0]))),
        ("cosine", vec![r(30, &[6]), r(31, &[6])], Box::new(|t, v| t.cosine(v[0], v[1]))),
        ("space_to_depth", vec![r(32, &[4, 4, 2])], Box::new(|t, v| {
            let o = t.space_to_depth(v[0], 2)?;
            probe(t, o)
        })),
        ("softmax_cross_entropy", vec![r(33, &[4, 3, 3])], Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets))),
    ]
}

/// Triplet vectors with both hinges active, away from the kink, and all
/// distances above 0.1.
fn active_triplet(rng: &mut ChaCha8Rng, c: usize) -> Vec<Tensor<f64>> {
    loop {
        let v: Vec<Tensor<f64>> = (0..6).map(|_| uniform(rng, &[c], -1.0, 1.0)).collect();
        let ok = [(0, 1, 2), (3, 4, 5)].iter().all(|&(a, p, n)| {
            let dp = dist(v[a].data(), v[p].data());
            let dn = dist(v[a].data(), v[n].data());
            dp > 0.1 && dn > 0.1 && dp + 0.5 - dn > 0.05
        });
        if ok {
            return v;
        }
    }
}

fn bundle_of(v: &[Var]) -> PrototypeBundle<Var> {
    PrototypeBundle {
        p_s: v[3],
        p_q: v[0],
        p_s_aug: v[3],
        p_q_aug: v[0],
        p_hybrid: v[0],
        p_q_plus: v[1],
        p_q_minus: v[2],
        p_s_plus: v[4],
        p_s_minus: v[5],
    }
}

/// Loss values `[L_co-triple, L_seg, L]` with fixed guidance.
fn model_losses(model: &SymNet<f64>, ep: &Episode<f64>, guidance: &Guidance<f64>) -> [f64; 3] {
    let mut tape = Tape::no_grad();
    let bound = model.store.bind(&mut tape).unwrap();
    let (_, terms) = model.losses_guided(&mut tape, &bound, ep, guidance).unwrap();
    let v = |x: Var| tape.value(x).item();
    let co = terms.co_triple.map_or(0.0, v);
    [co, v(terms.inter) + v(terms.final_seg), v(terms.total)]
}

struct FdReport {
    worst: [f64; 3],
    checked: usize,
    kinks: usize,
    worst_param: String,
    base: [f64; 3],
}

/// Finite differences of the composed losses on a sample of every
/// parameter tensor. Coordinates whose one-sided slopes disagree straddle
/// a kink (ReLU, hinge, argmax) and are counted, not compared.
fn model_gradients(seed: u64, per_tensor: usize) -> Res<FdReport> {
    let cfg = tiny_config();
    let mut model = SymNet::<f64>::init(&cfg)?;
    let data = Dataset::synthetic(cfg.n_classes, 3, cfg.image_size, cfg.downsample, seed)?;
    let split = SplitConfig::new(cfg.n_classes, cfg.n_folds, 0, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep: Episode<f64> = sample_episode(&data, &split, Mode::Train, 1, &mut rng)?;

    let mut guidance = None;
    let mut analytic = Vec::new();
    // a tape is differentiated once, so each loss gets its own forward pass
    for which in 0..3 {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape)?;
        let (pass, terms) = model.losses(&mut tape, &bound, &ep)?;
        let loss = match which {
            0 => terms.co_triple.ok_or("alignment is enabled, the triplet term must exist")?,
            1 => tape.add(terms.inter, terms.final_seg)?,
            _ => terms.total,
        };
        let g = tape.backward(loss)?;
        analytic.push(model.store.ids().map(|id| g.get(bound.var(id)).cloned()).collect::<Vec<_>>());
        guidance = Some(pass.guidance);
    }
    let guidance = guidance.expect("three passes ran");
    let base = model_losses(&model, &ep, &guidance);
    let ids: Vec<_> = model.store.ids().collect();
    let mut report = FdReport {
        worst: [0.0; 3],
        checked: 0,
        kinks: 0,
        worst_param: String::new(),
        base,
    };
    let mut worst_any = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let n = model.store.get(id).len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = model_losses(&model, &ep, &guidance);
            model.store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = model_losses(&model, &ep, &guidance);
            model.store.get_mut(id).data_mut()[j] = orig;
            report.checked += 1;
            let kink = (0..3).any(|l| {
                let fwd = (plus[l] - base[l]) / FD_STEP;
                let bwd = (base[l] - minus[l]) / FD_STEP;
                (fwd - bwd).abs() > 1e-3 + 1e-2 * fwd.abs().max(bwd.abs())
            });
            if kink {
                report.kinks += 1;
                continue;
            }
            for l in 0..3 {
                let numeric = (plus[l] - minus[l]) / (2.0 * FD_STEP);
                let a = analytic[l][k].as_ref().map_or(0.0, |g| g.data()[j]);
                let e = rel_error(a, numeric);
                report.worst[l] = report.worst[l].max(e);
                if e > worst_any {
                    worst_any = e;
                    report.worst_param = format!("{}[{j}]", model.store.name(id));
                }
            }
        }
    }
    Ok(report)
}

fn gradient_suite() -> Res<Outcome> {
    let mut worst_op = ("", 0.0f64);
    let mut entries = 0;
    let mut failures = Vec::new();
    for (name, inputs, build) in op_cases() {
        let r = grad_check(&inputs, FD_STEP, &build)?;
        entries += r.checked;
        if r.max_rel_error > worst_op.1 {
            worst_op = (name, r.max_rel_error);
        }
        if r.max_rel_error > FD_TOL {
            failures.push(format!("{name} {:.2e}", r.max_rel_error));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut triplet_worst: f64 = 0.0;
    for _ in 0..5 {
        let inputs = active_triplet(&mut rng, 6);
        let r = grad_check(&inputs, FD_STEP, |t, v| apa::co_triplet_loss(t, &bundle_of(v)).map_err(to_tensor_err))?;
        triplet_worst = triplet_worst.max(r.max_rel_error);
        entries += r.checked;
    }

    let truth = Tensor::from_fn(&[16, 16], |i| if (i / 16) % 7 < 3 && i % 16 > 4 { 1.0 } else { 0.0 });
    let sizes = [16usize, 8, 4, 2];
    let mut seg_inputs: Vec<Tensor<f64>> = sizes.iter().enumerate().map(|(i, &s)| random64(50 + i as u64, &[s, s, 2])).collect();
    seg_inputs.push(random64(60, &[16, 16, 2]));
    let seg = grad_check(&seg_inputs, FD_STEP, |t, v| {
        let preds = PredictionSet {
            intermediates: v[..4].to_vec(),
            final_logits: v[4],
        };
        let (inter, fin) = fusion::segmentation_loss(t, &preds, &truth).map_err(to_tensor_err)?;
        t.add(inter, fin)
    })?;
    entries += seg.checked;

    let fd = model_gradients(3, 8)?;
    let kink_share = fd.kinks as f64 / fd.checked as f64;
    let composed_ok = triplet_worst <= FD_TOL && seg.max_rel_error <= FD_TOL && fd.worst.iter().all(|&e| e <= FD_TOL);
    let detail = format!(
        "ops: worst {} {:.2e} over {entries} entries{}; L_co-triple {triplet_worst:.2e}, L_seg {:.2e} on leaves; \
         model params ({} coords, {} at kinks; losses {:.3}/{:.3}/{:.3}): L_co-triple {:.2e}, L_seg {:.2e}, L {:.2e} (worst at {})",
        worst_op.0,
        worst_op.1,
        if failures.is_empty() { String::new() } else { format!(" [over tol: {}]", failures.join(", ")) },
        seg.max_rel_error,
        fd.checked,
        fd.kinks,
        fd.base[0],
        fd.base[1],
        fd.base[2],
        fd.worst[0],
        fd.worst[1],
        fd.worst[2],
        fd.worst_param,
    );
    outcome(failures.is_empty() && composed_ok && kink_share < 0.1, detail)
}

fn to_tensor_err(e: symnet::Error) -> symnet_tensor::TensorError {
    match e {
        symnet::Error::Tensor(t) => t,
        other => panic!("unexpected error: {other}"),
    }
}

// ---------------------------------------------------------------- SPM

fn spm_brute_force() -> Res<Outcome> {
    let windows = Config::default().windows();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    for &h in &[4usize, 5, 6] {
        for _ in 0..20 {
            let c = rng.random_range(1..=8);
            let fs = uniform(&mut rng, &[h, h, c], -1.0, 1.0);
            let fq = uniform(&mut rng, &[h, h, c], -1.0, 1.0);
            let side = h * rng.random_range(1..=4);
            let mask = binary_mask(&mut rng, side, side, 0.4);
            let got = spm::prior_mask(&fs, &fq, &mask, &windows, SelfActivation::InnerProduct)?;
            let want = prior_mask(&fs, &fq, &mask, &windows);
            worst = worst.max(diff(&got.map, &want));
            trials += 1;
        }
    }

    let census = |disable_spm: bool| -> Res<usize> {
        let cfg = Config {
            disable_spm,
            ..tiny_config()
        };
        Ok(SymNet::<f64>::init(&cfg)?.store.census())
    };
    let (with, without) = (census(false)?, census(true)?);

    let mut scale_worst: f64 = 0.0;
    for _ in 0..20 {
        let fs = uniform(&mut rng, &[6, 6, 5], -1.0, 1.0);
        let fq = uniform(&mut rng, &[6, 6, 5], -1.0, 1.0);
        let mask = binary_mask(&mut rng, 24, 24, 0.4);
        let base = spm::prior_mask(&fs, &fq, &mask, &windows, SelfActivation::InnerProduct)?;
        for c in [1e-3, 0.37, 4.0, 250.0] {
            let scaled = spm::prior_mask(&fs.map(|v| v * c), &fq, &mask, &windows, SelfActivation::InnerProduct)?;
            scale_worst = scale_worst.max(diff(&scaled.map, &base.map));
        }
    }
    outcome(
        worst <= 1e-5 && with == without && scale_worst <= 1e-6,
        format!(
            "{trials} trials at H in {{4,5,6}}: max error {worst:.2e} (tol 1e-5); trainable census {with} with SPM, \
             {without} without; support rescaling max change {scale_worst:.2e} (tol 1e-6)"
        ),
    )
}

fn self_matching() -> Res<Outcome> {
    let cfg = Config::default();
    let model = SymNet::<f32>::init(&cfg)?;
    let data = Dataset::synthetic(cfg.n_classes, 12, cfg.image_size, cfg.downsample, 4)?;
    let split = SplitConfig::new(cfg.n_classes, cfg.n_folds, cfg.fold, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let side = cfg.feature_size();
    let (mut wins, mut gap_sum) = (0, 0.0);
    for _ in 0..100 {
        let mode = if rng.random_bool(0.5) { Mode::Train } else { Mode::Test };
        let mut ep: Episode<f32> = sample_episode(&data, &split, mode, 1, &mut rng)?;
        ep.query_image = ep.supports[0].image.clone();
        ep.query_mask = ep.supports[0].mask.clone();
        let prior = model.predict(&ep)?.prior.map.cast::<f64>();
        let truth = binarize(&ep.query_mask.cast(), side, side);
        let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
        for (&v, &t) in prior.data().iter().zip(truth.data()) {
            if t > 0.5 {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        let (inside, outside) = (si / ni as f64, so / no as f64);
        if inside > outside {
            wins += 1;
        }
        gap_sum += inside - outside;
    }
    outcome(
        wins >= 95,
        format!("inside > outside in {wins}/100 episodes (need 95), mean gap {:.3}", gap_sum / 100.0),
    )
}

// ---------------------------------------------------------------- APA

fn apa_symmetry() -> Res<Outcome> {
    let cfg = Config {
        share_align_params: true,
        ..tiny_config()
    };
    let model = SymNet::<f64>::init(&cfg)?;
    let n = cfg.feature_size();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let fs = uniform(&mut rng, &[n, n, cfg.c_mid], -1.0, 1.0);
        let fq = uniform(&mut rng, &[n, n, cfg.c_mid], -1.0, 1.0);
        let ms = binary_mask(&mut rng, n, n, 0.4);
        let mq = binary_mask(&mut rng, n, n, 0.4);
        let text = uniform(&mut rng, &[cfg.d_text], -1.0, 1.0);
        let run = |fq: &Tensor<f64>, prior: &Tensor<f64>, fs: &Tensor<f64>, ms: &Tensor<f64>| -> Res<(Tensor<f64>, Tensor<f64>)> {
            let mut tape = Tape::no_grad();
            let bound = model.store.bind(&mut tape)?;
            let q = tape.constant(fq.clone())?;
            let s = tape.constant(fs.clone())?;
            let t = tape.constant(text.clone())?;
            let pair = apa::align_branches(
                &mut tape,
                &bound,
                &model.align_query,
                &model.align_support,
                q,
                prior,
                s,
                ms,
                t,
                cfg.tau1,
            )?;
            Ok((tape.value(pair.p_q_aug).clone(), tape.value(pair.p_s_aug).clone()))
        };
        let (q_aug, s_aug) = run(&fq, &mq, &fs, &ms)?;
        let (q_swapped, s_swapped) = run(&fs, &ms, &fq, &mq)?;
        worst = worst.max(diff(&q_swapped, &s_aug)).max(diff(&s_swapped, &q_aug));
    }
    outcome(worst <= 1e-6, format!("20 swaps with tied parameters, max difference {worst:.2e} (tol 1e-6)"))
}

fn triplet_contract() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let loss = |v: &[Tensor<f64>]| -> Res<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = v.iter().map(|t| tape.constant(t.clone())).collect::<Result<_, _>>()?;
        let l = apa::co_triplet_loss(&mut tape, &bundle_of(&vars))?;
        Ok(tape.value(l).item())
    };
    for _ in 0..100 {
        let c = rng.random_range(1..=16);
        let scale = rng.random_range(0.1..2.0);
        let v: Vec<Tensor<f64>> = (0..6).map(|_| uniform(&mut rng, &[c], -scale, scale)).collect();
        let want = hinge(v[0].data(), v[1].data(), v[2].data()) + hinge(v[3].data(), v[4].data(), v[5].data());
        worst = worst.max((loss(&v)? - want).abs());
    }

    let mut zero_ok = true;
    for _ in 0..20 {
        let c = rng.random_range(1..=8);
        let mut v = Vec::new();
        for _ in 0..2 {
            let anchor = uniform(&mut rng, &[c], -1.0, 1.0);
            let dir = uniform(&mut rng, &[c], -1.0, 1.0);
            let len = dist(dir.data(), &vec![0.0; c]).max(1e-3);
            let reach = rng.random_range(0.5..2.0) + 1e-9;
            let minus = anchor.zip_map(&dir, |a, d| a + d / len * reach)?;
            v.extend([anchor.clone(), anchor, minus]);
        }
        zero_ok &= loss(&v)? == 0.0;
    }

    let a = uniform(&mut rng, &[7], -1.0, 1.0);
    let b = uniform(&mut rng, &[7], -1.0, 1.0);
    let collapsed = loss(&[a.clone(), a.clone(), a, b.clone(), b.clone(), b])?;
    outcome(
        worst <= 1e-6 && zero_ok && collapsed == 1.0,
        format!("100 bundles max error {worst:.2e} (tol 1e-6); satisfied margins give 0: {zero_ok}; collapsed gives {collapsed}"),
    )
}

// ---------------------------------------------------------------- TDC

fn tdc_equivalence() -> Res<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let counts = [3usize, 6, 4];
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let h = rng.random_range(4..=6);
        let widths: Vec<usize> = (0..3).map(|_| rng.random_range(1..=8)).collect();
        let mut pyramid = || FeaturePyramid {
            low: (0..counts[0]).map(|_| uniform(&mut rng, &[h, h, widths[0]], -1.0, 1.0)).collect(),
            mid: (0..counts[1]).map(|_| uniform(&mut rng, &[h, h, widths[1]], -1.0, 1.0)).collect(),
            high: (0..counts[2]).map(|_| uniform(&mut rng, &[h, h, widths[2]], -1.0, 1.0)).collect(),
        };
        let (fs, fq) = (pyramid(), pyramid());
        let side = h * rng.random_range(1..=4);
        let mask = binary_mask(&mut rng, side, side, 0.4);
        let got = tdc::correlation_maps(&fs, &fq, &mask, CorrReduce::Max)?;
        let fg = binarize(&mask, h, h);
        for (l, (ls, lq)) in fs.levels().into_iter().zip(fq.levels()).enumerate() {
            let n = ls.len();
            for (b, (s, q)) in ls.iter().zip(lq).enumerate() {
                let want = block_correlation(q, s, &fg);
                for (p, w) in want.iter().enumerate() {
                    worst = worst.max((got.levels[l].data()[p * n + b] - w).abs());
                }
            }
        }
    }

    let cfg = Config::default();
    let model = SymNet::<f32>::init(&cfg)?;
    let data = Dataset::synthetic(cfg.n_classes, 3, cfg.image_size, cfg.downsample, 7)?;
    let split = SplitConfig::new(cfg.n_classes, cfg.n_folds, cfg.fold, cfg.seed)?;
    let ep: Episode<f32> = sample_episode(&data, &split, Mode::Train, 1, &mut rng)?;
    let mut tape = Tape::no_grad();
    let bound = model.store.bind(&mut tape)?;
    let pass = model.forward(&mut tape, &bound, &ep)?;
    let stack = pass.correlations.ok_or("correlations missing")?;
    let n_maps = stack.total_maps();
    let hyper = model.tdc.forward(&mut tape, &bound, &stack)?;
    let n_hyper = tape.shape(hyper)[2];
    outcome(
        worst <= 1e-5 && n_maps == 13 && n_hyper == 48,
        format!("20 pyramids max error {worst:.2e} (tol 1e-5); N = {n_maps}; hyper feature has {n_hyper} channels"),
    )
}

// ---------------------------------------------------------------- K-shot

fn kshot_identity() -> Res<Outcome> {
    let cfg = Config {
        precision: Precision::F64,
        ..Config::default()
    };
    let model = SymNet::<f64>::init(&cfg)?;
    let data = Dataset::synthetic(cfg.n_classes, 4, cfg.image_size, cfg.downsample, 8)?;
    let split = SplitConfig::new(cfg.n_classes, cfg.n_folds, cfg.fold, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut masks_equal = true;
    for _ in 0..3 {
        let ep: Episode<f64> = sample_episode(&data, &split, Mode::Test, 1, &mut rng)?;
        let one = model.predict(&ep)?;
        for k in [2, 3, 5] {
            let many = model.predict(&repeat_support(&ep, k))?;
            worst = worst
                .max(diff(&many.final_logits, &one.final_logits))
                .max(diff(&many.prior.map, &one.prior.map));
            masks_equal &= many.mask == one.mask;
        }
    }
    outcome(
        worst <= 1e-6 && masks_equal,
        format!("K in {{2,3,5}} vs 1-shot on 3 episodes: max logit/prior difference {worst:.2e} (tol 1e-6), masks equal: {masks_equal}"),
    )
}

// ---------------------------------------------------------------- training

fn query_iou(pred: &Tensor<f32>, truth: &Tensor<f32>) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p > 0.5, t > 0.5) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    tp / (tp + fp + fn_)
}

fn overfit() -> Res<Outcome> {
    let cfg = Config::default();
    let data = Dataset::synthetic(cfg.n_classes, 12, cfg.image_size, cfg.downsample, 9)?;
    let split = SplitConfig::new(cfg.n_classes, cfg.n_folds, cfg.fold, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ep: Episode<f32> = sample_episode(&data, &split, Mode::Train, 1, &mut rng)?;
    let mut trainer = Trainer::<f32>::new(&cfg)?;
    let first = trainer.step_on(&ep)?.total;
    for _ in 1..300 {
        trainer.step_on(&ep)?;
    }
    let last = {
        let mut tape = Tape::no_grad();
        let bound = trainer.model.store.bind(&mut tape)?;
        let (_, terms) = trainer.model.losses(&mut tape, &bound, &ep)?;
        tape.value(terms.total).item() as f64
    };
    let drop = 1.0 - last / first;
    let iou = query_iou(&trainer.model.predict(&ep)?.mask, &ep.query_mask);
    outcome(
        drop >= 0.9 && iou >= 0.9,
        format!("loss {first:.4} -> {last:.4} ({:.1}% drop, need 90%); query IoU {iou:.4} (need 0.90)", drop * 100.0),
    )
}

const SMOKE_DATA_SEED: u64 = 0;
const SMOKE_EVAL_SEED: u64 = 1000;

fn smoke_setup() -> Res<(Config, Dataset, SplitConfig, EvalOptions)> {
    let cfg = Config::default();
    let data = Dataset::synthetic(cfg.n_classes, 12, cfg.image_size, cfg.downsample, SMOKE_DATA_SEED)?;
    let split = SplitConfig::new(cfg.n_classes, cfg.n_folds, cfg.fold, cfg.seed)?;
    let opts = EvalOptions {
        k: 1,
        rounds: 5,
        episodes: 200,
        seed: SMOKE_EVAL_SEED,
        dump_dir: None,
    };
    Ok((cfg, data, split, opts))
}

/// Metrics log of the full 1000-step smoke-test run, kept for the determinism check.
static SMOKE_LOG: OnceLock<Vec<u8>> = OnceLock::new();

fn full_run(cfg: &Config, data: &Dataset) -> Res<(Trainer<f32>, Vec<u8>)> {
    let dir = tempfile::tempdir()?;
    let mut trainer = Trainer::<f32>::new(cfg)?;
    let paths = train_to_dir(&mut trainer, data, dir.path())?;
    Ok((trainer, std::fs::read(paths.metrics)?))
}

fn generalization() -> Res<Outcome> {
    let (cfg, data, split, opts) = smoke_setup()?;
    let (train_n, test_n) = (split.train_classes().len(), split.test_classes().len());
    let baseline = evaluate(&SymNet::<f32>::init(&cfg)?, &data, &split, &opts)?.mean_miou;
    let (trainer, log) = full_run(&cfg, &data)?;
    let _ = SMOKE_LOG.set(log);
    let full = evaluate(&trainer.model, &data, &split, &opts)?.mean_miou;

    let mut ablations = Vec::new();
    for (name, set) in [
        ("SPM", (|c: &mut Config| c.disable_spm = true) as fn(&mut Config)),
        ("APA", |c: &mut Config| c.disable_apa = true),
        ("TDC", |c: &mut Config| c.disable_tdc = true),
    ] {
        let mut c = cfg.clone();
        set(&mut c);
        let mut t = Trainer::<f32>::new(&c)?;
        t.run(&data, &split, c.steps, None, |_, _| Ok(()))?;
        ablations.push((name, evaluate(&t.model, &data, &split, &opts)?.mean_miou));
    }
    let ablation_ok = ablations.iter().all(|&(_, m)| m <= full + 0.02);
    let mut detail = format!(
        "{train_n} train / {test_n} test classes; mIoU {full:.4} (need 0.55), baseline {baseline:.4} (need +0.10)"
    );
    for (name, m) in &ablations {
        write!(detail, "; without {name} {m:.4} ({:+.4})", m - full)?;
    }
    outcome(full >= 0.55 && full >= baseline + 0.10 && ablation_ok, detail)
}

fn persistence() -> Res<Outcome> {
    let (cfg, data, split, _) = smoke_setup()?;
    let trace = |t: &mut Trainer<f32>, steps: u64| -> Res<Vec<StepMetrics>> {
        let mut out = Vec::new();
        t.run(&data, &split, steps, None, |_, m| {
            out.push(m.clone());
            Ok(())
        })?;
        Ok(out)
    };
    let mut trainer = Trainer::<f32>::new(&cfg)?;
    trace(&mut trainer, 15)?;
    let bytes = trainer.checkpoint().to_bytes();
    let restored = Checkpoint::<f32>::from_bytes(&bytes)?;
    let bytes_equal = restored.to_bytes() == bytes;
    let records_equal = restored == trainer.checkpoint();

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("mid.symn");
    restored.save(&path)?;
    let file_equal = std::fs::read(&path)? == bytes && Checkpoint::<f32>::load(&path)? == restored;

    let straight = trace(&mut trainer, 15)?;
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::<f32>::from_bytes(&bytes)?)?;
    let replay = trace(&mut resumed, 15)?;
    let as_json = |ms: &[StepMetrics]| ms.iter().map(|m| serde_json::to_string(m).unwrap()).collect::<Vec<_>>();
    let trace_equal = as_json(&straight) == as_json(&replay);
    let end_equal = trainer.checkpoint().to_bytes() == resumed.checkpoint().to_bytes();
    outcome(
        bytes_equal && records_equal && file_equal && trace_equal && end_equal,
        format!(
            "byte round trip {bytes_equal}, records {records_equal}, file {file_equal}; \
             15 resumed steps match the uninterrupted trace {trace_equal}, final state {end_equal}"
        ),
    )
}

fn determinism() -> Res<Outcome> {
    let (cfg, data, _, _) = smoke_setup()?;
    let first = match SMOKE_LOG.get() {
        Some(log) => log.clone(),
        None => full_run(&cfg, &data)?.1,
    };
    let second = full_run(&cfg, &data)?.1;
    let lines = second.iter().filter(|&&b| b == b'\n').count();
    outcome(
        first == second && lines as u64 == cfg.steps,
        format!("two {}-step runs: metric logs identical: {} ({lines} lines)", cfg.steps, first == second),
    )
}
