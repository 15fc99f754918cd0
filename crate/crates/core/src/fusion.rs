//! Multi-scale fusion decoder, segmentation losses and K-shot averaging.
//!
//! The decoder concatenates the query mid feature, the tiled hybrid
//! prototype, the prior mask and the hyper-correlation feature, then runs
//! four pooled branches. Each branch emits its own 2-class logits; their
//! features are upsampled, merged and decoded into the final mask logits.

use rand::Rng;
use symnet_tensor::{kernels, Real, Tape, Tensor, Var};

use crate::apa::PrototypeBundle;
use crate::error::{invalid, Result};
use crate::mask::targets;
use crate::params::{Bound, Conv, ParamId, ParamStore};
use crate::spm::{check_binary_mask, PriorMask};
use crate::tdc::CorrelationStack;

/// Number of intermediate prediction scales.
pub const N_SCALES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet<V> {
    pub intermediates: Vec<V>,
    pub final_logits: V,
}

impl PredictionSet<Var> {
    pub fn values<T: Real>(&self, tape: &Tape<'_, T>) -> PredictionSet<Tensor<T>> {
        PredictionSet {
            intermediates: self.intermediates.iter().map(|&v| tape.value(v).clone()).collect(),
            final_logits: tape.value(self.final_logits).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Branch {
    conv1: Conv,
    conv2: Conv,
    classify: Conv,
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    branches: Vec<Branch>,
    merge1: Conv,
    merge2: Conv,
    classify: Conv,
    in_channels: usize,
}

impl FusionHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, in_channels: usize, width: usize) -> Self {
        let branches = (0..N_SCALES)
            .map(|k| Branch {
                conv1: Conv::new(store, rng, &format!("head.branch{k}.conv1"), 3, in_channels, width, 1.0),
                conv2: Conv::new(store, rng, &format!("head.branch{k}.conv2"), 3, width, width, 1.0),
                classify: Conv::new(store, rng, &format!("head.branch{k}.classify"), 1, width, 2, 1.0),
            })
            .collect();
        Self {
            branches,
            merge1: Conv::new(store, rng, "head.merge1", 3, N_SCALES * width, width, 1.0),
            merge2: Conv::new(store, rng, "head.merge2", 3, width, width, 1.0),
            classify: Conv::new(store, rng, "head.classify", 1, width, 2, 1.0),
            in_channels,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.branches {
            ids.extend(b.conv1.ids());
            ids.extend(b.conv2.ids());
            ids.extend(b.classify.ids());
        }
        for c in [self.merge1, self.merge2, self.classify] {
            ids.extend(c.ids());
        }
        ids
    }

    /// Branch sizes `H, H/2, H/4, H/8` (at least 1).
    pub fn scales(h: usize, w: usize) -> [(usize, usize); N_SCALES] {
        std::array::from_fn(|k| ((h >> k).max(1), (w >> k).max(1)))
    }

    /// `query_mid` is `H x W x C_m`, `p_hybrid` length `c`, `prior` an `H x W`
    /// tensor, `hyper` `H x W x N'`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        query_mid: Var,
        prior: &Tensor<T>,
        p_hybrid: Var,
        hyper: Var,
        image_size: (usize, usize),
    ) -> Result<PredictionSet<Var>> {
        let (h, w, _) = tape.value(query_mid).hwc()?;
        if tape.shape(p_hybrid).len() != 1 {
            return invalid(format!("hybrid prototype must be a vector, got {:?}", tape.shape(p_hybrid)));
        }
        let prior = kernels::bilinear_resize(prior, (h, w))?;
        let prior = tape.constant(prior.reshape(&[h, w, 1])?)?;
        let tiled = tape.broadcast_spatial(p_hybrid, h, w)?;
        let (hh, hw, _) = tape.value(hyper).hwc()?;
        if (hh, hw) != (h, w) {
            return invalid(format!("hyper feature {:?} does not match {h}x{w}", tape.shape(hyper)));
        }
        let x = tape.concat(&[query_mid, tiled, prior, hyper])?;
        let c = tape.shape(x)[2];
        if c != self.in_channels {
            return invalid(format!("fusion input has {c} channels, expected {}", self.in_channels));
        }
        let mut intermediates = Vec::with_capacity(N_SCALES);
        let mut upsampled = Vec::with_capacity(N_SCALES);
        for (branch, size) in self.branches.iter().zip(Self::scales(h, w)) {
            let y = if size == (h, w) { x } else { tape.adaptive_pool(x, size)? };
            let y = branch.conv1.forward_relu(tape, bound, y)?;
            let y = branch.conv2.forward_relu(tape, bound, y)?;
            intermediates.push(branch.classify.forward(tape, bound, y)?);
            upsampled.push(if size == (h, w) { y } else { tape.resize(y, (h, w))? });
        }
        let m = tape.concat(&upsampled)?;
        let m = self.merge1.forward_relu(tape, bound, m)?;
        let m = self.merge2.forward_relu(tape, bound, m)?;
        let logits = self.classify.forward(tape, bound, m)?;
        let final_logits = tape.resize(logits, image_size)?;
        Ok(PredictionSet {
            intermediates,
            final_logits,
        })
    }
}

/// The three loss terms; `total` is their unweighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub co_triple: Option<Var>,
    pub inter: Var,
    pub final_seg: Var,
    pub total: Var,
}

/// `(L_inter, L_final)`: mean cross-entropy over the four scales, and at image scale.
pub fn segmentation_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    preds: &PredictionSet<Var>,
    truth: &Tensor<T>,
) -> Result<(Var, Var)> {
    check_binary_mask(truth)?;
    let (fh, fw, _) = tape.value(preds.final_logits).hwc()?;
    if truth.shape() != [fh, fw] {
        return invalid(format!("ground truth {:?} does not match prediction {fh}x{fw}", truth.shape()));
    }
    let mut terms = Vec::with_capacity(preds.intermediates.len());
    for &logits in &preds.intermediates {
        let (h, w, _) = tape.value(logits).hwc()?;
        let t = targets(truth, (h, w))?;
        terms.push(tape.softmax_cross_entropy(logits, &t)?);
    }
    let inter = tape.average(&terms)?;
    let t = targets(truth, (fh, fw))?;
    let final_seg = tape.softmax_cross_entropy(preds.final_logits, &t)?;
    Ok((inter, final_seg))
}

/// `L = L_co-triple + L_inter + L_final`; the triplet term is absent when alignment is ablated.
pub fn total_loss<T: Real>(tape: &mut Tape<'_, T>, inter: Var, final_seg: Var, co_triple: Option<Var>) -> Result<LossTerms> {
    let mut total = tape.add(inter, final_seg)?;
    if let Some(c) = co_triple {
        total = tape.add(total, c)?;
    }
    Ok(LossTerms {
        co_triple,
        inter,
        final_seg,
        total,
    })
}

/// Element-wise mean of the per-shot prior masks, prototype bundles and correlation stacks.
pub type ShotTriple<'s, T> = (&'s PriorMask<T>, &'s PrototypeBundle<Var>, &'s CorrelationStack<T>);

pub fn kshot_average<T: Real>(
    tape: &mut Tape<'_, T>,
    shots: &[ShotTriple<'_, T>],
) -> Result<(PriorMask<T>, PrototypeBundle<Var>, CorrelationStack<T>)> {
    if shots.is_empty() {
        return invalid("K-shot averaging needs at least one shot");
    }
    let priors: Vec<_> = shots.iter().map(|s| s.0).collect();
    let bundles: Vec<_> = shots.iter().map(|s| s.1).collect();
    let stacks: Vec<_> = shots.iter().map(|s| s.2).collect();
    Ok((
        PriorMask::average(&priors)?,
        PrototypeBundle::average(tape, &bundles)?,
        CorrelationStack::average(&stacks)?,
    ))
}

/// Argmax over the two logits: 1 where foreground wins.
pub fn predicted_mask<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = logits.hwc()?;
    if c != 2 {
        return invalid(format!("expected 2-class logits, got {c}"));
    }
    let data = logits
        .data()
        .chunks(2)
        .map(|p| if p[1] > p[0] { T::one() } else { T::zero() })
        .collect();
    Ok(Tensor::new(vec![h, w], data)?)
}
