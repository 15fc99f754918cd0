//! Symmetric prototype extraction, visual-text alignment, hybrid fusion and
//! joint triplet mining.
//!
//! Selections (thresholds, masks, argmax fallbacks) are computed on values and
//! act as gradient stops; gradients reach the selected features.

use rand::Rng;
use symnet_tensor::{Real, Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::mask::{binarize_resized, positions};
use crate::params::{he_normal, Bound, Linear, ParamId, ParamStore};

/// Hinge margin of the triplet terms.
pub const TRIPLET_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrototypeBundle<V> {
    pub p_s: V,
    pub p_q: V,
    pub p_s_aug: V,
    pub p_q_aug: V,
    pub p_hybrid: V,
    pub p_q_plus: V,
    pub p_q_minus: V,
    pub p_s_plus: V,
    pub p_s_minus: V,
}

impl<V: Clone> PrototypeBundle<V> {
    fn fields(&self) -> [V; 9] {
        [
            self.p_s.clone(),
            self.p_q.clone(),
            self.p_s_aug.clone(),
            self.p_q_aug.clone(),
            self.p_hybrid.clone(),
            self.p_q_plus.clone(),
            self.p_q_minus.clone(),
            self.p_s_plus.clone(),
            self.p_s_minus.clone(),
        ]
    }

    fn from_fields(f: [V; 9]) -> Self {
        let [p_s, p_q, p_s_aug, p_q_aug, p_hybrid, p_q_plus, p_q_minus, p_s_plus, p_s_minus] = f;
        Self {
            p_s,
            p_q,
            p_s_aug,
            p_q_aug,
            p_hybrid,
            p_q_plus,
            p_q_minus,
            p_s_plus,
            p_s_minus,
        }
    }
}

impl PrototypeBundle<Var> {
    /// Field-wise mean over shots.
    pub fn average<T: Real>(tape: &mut Tape<'_, T>, shots: &[&Self]) -> Result<Self> {
        if shots.is_empty() {
            return invalid("cannot average zero prototype bundles");
        }
        let per_field: Vec<[Var; 9]> = shots.iter().map(|b| b.fields()).collect();
        let mut out = per_field[0];
        for (i, slot) in out.iter_mut().enumerate() {
            let column: Vec<Var> = per_field.iter().map(|f| f[i]).collect();
            *slot = tape.average(&column)?;
        }
        Ok(Self::from_fields(out))
    }

    pub fn values<T: Real>(&self, tape: &Tape<'_, T>) -> PrototypeBundle<Tensor<T>> {
        PrototypeBundle::from_fields(self.fields().map(|v| tape.value(v).clone()))
    }
}

/// Single-head visual-text attention weights for one branch.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    /// Logits are divided by this, `sqrt(d_scale)`.
    pub scale: f64,
}

impl AlignmentParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_m: usize,
        c: usize,
        d_text: usize,
        ffn_mult: usize,
        d_scale: f64,
    ) -> Self {
        let w_q = store.add(format!("{name}.w_q"), he_normal(rng, &[c + d_text, c], c + d_text, 0.5), true);
        let w_k = store.add(format!("{name}.w_k"), he_normal(rng, &[1, 1, c_m, c], c_m, 0.5), true);
        let w_v = store.add(format!("{name}.w_v"), he_normal(rng, &[1, 1, c_m, c], c_m, 0.5), true);
        let ffn_in = Linear::new(store, rng, &format!("{name}.ffn_in"), c, c * ffn_mult, 1.0);
        let ffn_out = Linear::new(store, rng, &format!("{name}.ffn_out"), c * ffn_mult, c, 0.5);
        Self {
            w_q,
            w_k,
            w_v,
            ffn_in,
            ffn_out,
            scale: d_scale.sqrt(),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_q, self.w_k, self.w_v];
        ids.extend([self.ffn_in.weight, self.ffn_in.bias, self.ffn_out.weight, self.ffn_out.bias]);
        ids
    }
}

/// Mean feature over the foreground of `mask` resized to the feature grid.
pub fn masked_average_prototype<T: Real>(tape: &mut Tape<'_, T>, features: Var, mask: &Tensor<T>) -> Result<Var> {
    let (h, w, _) = tape.value(features).hwc()?;
    let m = binarize_resized(mask, (h, w))?;
    let fg = positions(&m, |v| v > T::zero());
    if fg.is_empty() {
        return Err(Error::EmptyForeground(h, w));
    }
    Ok(tape.select_mean(features, &fg)?)
}

fn first_extreme<T: Real>(values: &[T], better: impl Fn(T, T) -> bool) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if better(v, values[best]) {
            best = i;
        }
    }
    best
}

fn check_prior<T: Real>(tape: &Tape<'_, T>, features: Var, prior: &Tensor<T>) -> Result<()> {
    let (h, w, _) = tape.value(features).hwc()?;
    if prior.shape() != [h, w] {
        return invalid(format!("prior {:?} does not match features {:?}", prior.shape(), tape.shape(features)));
    }
    Ok(())
}

/// Mean query feature where `M^pri > tau1`, else the feature at the first argmax.
pub fn query_prototype<T: Real>(tape: &mut Tape<'_, T>, features: Var, prior: &Tensor<T>, tau1: f64) -> Result<Var> {
    check_prior(tape, features, prior)?;
    let mut sel = positions(prior, |v| v > T::of(tau1));
    if sel.is_empty() {
        sel.push(first_extreme(prior.data(), |a, b| a > b));
    }
    Ok(tape.select_mean(features, &sel)?)
}

/// Refines prototype `p` by attending from `[p, t]` over the weighted features.
pub fn visual_text_align<T: Real>(
    tape: &mut Tape<'_, T>,
    bound: &Bound,
    params: &AlignmentParams,
    p: Var,
    t: Var,
    weighted: Var,
) -> Result<Var> {
    let c = tape.value(p).len();
    let d = tape.value(t).len();
    let (h, w, _) = tape.value(weighted).hwc()?;
    let wq_shape = tape.shape(bound.var(params.w_q)).to_vec();
    if wq_shape != [c + d, c] {
        return invalid(format!("W_Q {:?} does not fit prototype {c} and text {d}", wq_shape));
    }
    let pr = tape.reshape(p, &[1, c])?;
    let tr = tape.reshape(t, &[1, d])?;
    let pt = tape.concat(&[pr, tr])?;
    let q = tape.matmul(pt, bound.var(params.w_q))?;
    let k = tape.conv2d(weighted, bound.var(params.w_k), None)?;
    let k = tape.reshape(k, &[h * w, c])?;
    let v = tape.conv2d(weighted, bound.var(params.w_v), None)?;
    let v = tape.reshape(v, &[h * w, c])?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, T::of(1.0 / params.scale))?;
    let attn = tape.softmax_rows(logits)?;
    let ctx = tape.matmul(attn, v)?;
    let hidden = params.ffn_in.forward(tape, bound, ctx)?;
    let hidden = tape.relu(hidden)?;
    let out = params.ffn_out.forward(tape, bound, hidden)?;
    let out = tape.reshape(out, &[c])?;
    Ok(tape.add(out, p)?)
}

pub fn hybrid_prototype<T: Real>(tape: &mut Tape<'_, T>, p_q_aug: Var, p_s_aug: Var, alpha: f64, beta: f64) -> Result<Var> {
    let a = tape.scale(p_q_aug, T::of(alpha))?;
    let b = tape.scale(p_s_aug, T::of(beta))?;
    Ok(tape.add(a, b)?)
}

/// `(p_q^-, p_q^+)`: the low-prior mean and the uncertain-band mean.
pub fn mine_query_triplet<T: Real>(
    tape: &mut Tape<'_, T>,
    features: Var,
    prior: &Tensor<T>,
    tau2: f64,
    tau3: f64,
    tau4: f64,
) -> Result<(Var, Var)> {
    check_prior(tape, features, prior)?;
    let mut neg = positions(prior, |v| v < T::of(tau2));
    if neg.is_empty() {
        neg.push(first_extreme(prior.data(), |a, b| a < b));
    }
    let mut pos = positions(prior, |v| v > T::of(tau3) && v < T::of(tau4));
    if pos.is_empty() {
        let mid = T::of(0.5 * (tau3 + tau4));
        let gaps: Vec<T> = prior.data().iter().map(|&v| (v - mid).abs()).collect();
        pos.push(first_extreme(&gaps, |a, b| a < b));
    }
    let minus = tape.select_mean(features, &neg)?;
    let plus = tape.select_mean(features, &pos)?;
    Ok((minus, plus))
}

/// `(p_s^-, p_s^+)`: the background mean and the foreground feature farthest
/// from `p_s_aug`. `mask` is binary on the feature grid.
pub fn mine_support_triplet<T: Real>(
    tape: &mut Tape<'_, T>,
    features: Var,
    mask: &Tensor<T>,
    p_s_aug: Var,
) -> Result<(Var, Var)> {
    check_prior(tape, features, mask)?;
    let all: Vec<usize> = (0..mask.len()).collect();
    let bg = positions(mask, |v| v <= T::zero());
    let fg = positions(mask, |v| v > T::zero());
    let minus = tape.select_mean(features, if bg.is_empty() { &all } else { &bg })?;
    let plus = if fg.is_empty() {
        tape.select_mean(features, &all)?
    } else {
        let anchor = tape.value(p_s_aug).data();
        let f = tape.value(features);
        let dist = |p: usize| -> T {
            f.pixel(p)
                .iter()
                .zip(anchor)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum()
        };
        let mut best = fg[0];
        let mut best_d = dist(best);
        for &p in &fg[1..] {
            let d = dist(p);
            if d > best_d {
                best = p;
                best_d = d;
            }
        }
        tape.select_mean(features, &[best])?
    };
    Ok((minus, plus))
}

fn hinge<T: Real>(tape: &mut Tape<'_, T>, anchor: Var, plus: Var, minus: Var) -> Result<Var> {
    let dp = tape.sub(anchor, plus)?;
    let dp = tape.norm(dp)?;
    let dn = tape.sub(anchor, minus)?;
    let dn = tape.norm(dn)?;
    let gap = tape.sub(dp, dn)?;
    let margin = tape.constant(Tensor::scalar(T::of(TRIPLET_MARGIN)))?;
    let gap = tape.add(gap, margin)?;
    Ok(tape.relu(gap)?)
}

/// Sum of the query and support hinge terms.
pub fn co_triplet_loss<T: Real>(tape: &mut Tape<'_, T>, b: &PrototypeBundle<Var>) -> Result<Var> {
    let q = hinge(tape, b.p_q_aug, b.p_q_plus, b.p_q_minus)?;
    let s = hinge(tape, b.p_s_aug, b.p_s_plus, b.p_s_minus)?;
    Ok(tape.add(q, s)?)
}

/// Tape handles to one branch's inputs.
#[derive(Debug, Clone, Copy)]
pub struct BranchInputs<'m, T> {
    pub features: Var,
    pub weights: &'m Tensor<T>,
}

/// Both prototypes before and after alignment.
#[derive(Debug, Clone, Copy)]
pub struct AlignedPair {
    pub p_q: Var,
    pub p_s: Var,
    pub p_q_aug: Var,
    pub p_s_aug: Var,
}

/// Runs the query and support branches. `prior` is `M^pri` on the feature
/// grid; `support_mask` is the binary support mask at any size.
#[allow(clippy::too_many_arguments)]
pub fn align_branches<T: Real>(
    tape: &mut Tape<'_, T>,
    bound: &Bound,
    query_params: &AlignmentParams,
    support_params: &AlignmentParams,
    query_features: Var,
    prior: &Tensor<T>,
    support_features: Var,
    support_mask: &Tensor<T>,
    text: Var,
    tau1: f64,
) -> Result<AlignedPair> {
    let (h, w, _) = tape.value(support_features).hwc()?;
    let p_q = query_prototype(tape, query_features, prior, tau1)?;
    let prior_var = tape.constant(prior.clone())?;
    let fq = tape.mul_spatial(query_features, prior_var)?;
    let p_q_aug = visual_text_align(tape, bound, query_params, p_q, text, fq)?;

    let p_s = masked_average_prototype(tape, support_features, support_mask)?;
    let m = tape.constant(binarize_resized(support_mask, (h, w))?)?;
    let fs = tape.mul_spatial(support_features, m)?;
    let p_s_aug = visual_text_align(tape, bound, support_params, p_s, text, fs)?;
    Ok(AlignedPair {
        p_q,
        p_s,
        p_q_aug,
        p_s_aug,
    })
}
