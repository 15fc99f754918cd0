//! Per-block support/query correlation maps and their top-down fusion.

use rand::Rng;
use symnet_tensor::{kernels, Real, Tape, Tensor, Var};

use crate::config::CorrReduce;
use crate::encoder::FeaturePyramid;
use crate::error::{invalid, Result};
use crate::mask::{binarize_resized, positions};
use crate::params::{Bound, Conv, ParamId, ParamStore};
use crate::spm::{mean_of, weight_positions};

/// One `H x W x N_l` correlation map per pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStack<T> {
    pub levels: [Tensor<T>; 3],
}

impl<T: Real> CorrelationStack<T> {
    pub fn channels(&self) -> [usize; 3] {
        self.levels.each_ref().map(|l| l.shape()[2])
    }

    pub fn total_maps(&self) -> usize {
        self.channels().iter().sum()
    }

    pub fn average(shots: &[&CorrelationStack<T>]) -> Result<Self> {
        let Some(first) = shots.first() else {
            return invalid("cannot average zero correlation stacks");
        };
        if shots.len() == 1 {
            return Ok((*first).clone());
        }
        let mut levels = first.levels.clone();
        for (l, slot) in levels.iter_mut().enumerate() {
            *slot = mean_of(shots.iter().map(|s| &s.levels[l]))?;
        }
        Ok(Self { levels })
    }
}

/// Rows of an `H x W x C` map scaled to unit length; near-zero rows become zero.
fn unit_rows<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, usize)> {
    let (_, _, c) = x.hwc()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let n = kernels::l2_norm(row);
        let inv = if n < T::eps_norm() { T::zero() } else { T::one() / n };
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((out, c))
}

/// Correlation of one block pair as an `H x W x 1` map: for each query position, the reduction over
/// foreground support positions of the clamped cosine.
pub fn block_correlation<T: Real>(
    query: &Tensor<T>,
    support: &Tensor<T>,
    foreground: &Tensor<T>,
    reduce: CorrReduce,
) -> Result<Tensor<T>> {
    if query.shape() != support.shape() {
        return invalid(format!("block shapes differ: {:?} vs {:?}", query.shape(), support.shape()));
    }
    let (h, w, _) = query.hwc()?;
    let fg = positions(foreground, |v| v > T::zero());
    if fg.is_empty() {
        return Ok(Tensor::zeros(&[h, w, 1]));
    }
    let masked = weight_positions(support, foreground)?;
    let (q, c) = unit_rows(query)?;
    let (s_all, _) = unit_rows(&masked)?;
    let mut s = Vec::with_capacity(fg.len() * c);
    for &p in &fg {
        s.extend_from_slice(&s_all[p * c..(p + 1) * c]);
    }
    let (nq, ns) = (h * w, fg.len());
    let mut cos = vec![T::zero(); nq * ns];
    T::gemm(nq, c, ns, &q, false, &s, true, T::zero(), &mut cos);
    let clamp = |v: T| v.max(T::zero()).min(T::one());
    let out = cos
        .chunks(ns)
        .map(|row| match reduce {
            CorrReduce::Max => row.iter().copied().map(clamp).fold(T::zero(), T::max),
            CorrReduce::Mean => row.iter().copied().map(clamp).sum::<T>() / T::of(ns as f64),
        })
        .collect();
    Ok(Tensor::new(vec![h, w, 1], out)?)
}

/// Correlation maps for every block pair, concatenated per level.
pub fn correlation_maps<T: Real>(
    support: &FeaturePyramid<Tensor<T>>,
    query: &FeaturePyramid<Tensor<T>>,
    mask: &Tensor<T>,
    reduce: CorrReduce,
) -> Result<CorrelationStack<T>> {
    if support.block_counts() != query.block_counts() {
        return invalid(format!(
            "pyramid levels differ: support {:?}, query {:?}",
            support.block_counts(),
            query.block_counts()
        ));
    }
    let (h, w, _) = query.high_feature().hwc()?;
    let fg = binarize_resized(mask, (h, w))?;
    let mut levels: [Tensor<T>; 3] = std::array::from_fn(|_| Tensor::zeros(&[1]));
    for (slot, (ls, lq)) in levels.iter_mut().zip(support.levels().into_iter().zip(query.levels())) {
        let maps = ls
            .iter()
            .zip(lq)
            .map(|(s, q)| block_correlation(q, s, &fg, reduce))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = maps.iter().collect();
        *slot = kernels::concat_last(&refs)?;
    }
    Ok(CorrelationStack { levels })
}

/// `F^hyper = C(Cat[C(Cat[P3, P2]), P1])` with 1x1 projections `P_l` and 3x3 convs `C`.
#[derive(Debug, Clone, Copy)]
pub struct TopDownFuse {
    pub project: [Conv; 3],
    pub merge_high: Conv,
    pub merge_low: Conv,
    pub n_prime: usize,
}

impl TopDownFuse {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, blocks: [usize; 3], n_prime: usize) -> Self {
        let project = std::array::from_fn(|l| Conv::new(store, rng, &format!("tdc.project{}", l + 1), 1, blocks[l], n_prime, 1.0));
        let merge_high = Conv::new(store, rng, "tdc.merge_high", 3, 2 * n_prime, n_prime, 1.0);
        let merge_low = Conv::new(store, rng, "tdc.merge_low", 3, 2 * n_prime, n_prime, 1.0);
        Self {
            project,
            merge_high,
            merge_low,
            n_prime,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.project.iter().flat_map(Conv::ids).collect();
        ids.extend(self.merge_high.ids());
        ids.extend(self.merge_low.ids());
        ids
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, bound: &Bound, stack: &CorrelationStack<T>) -> Result<Var> {
        let mut p = [None; 3];
        for (l, level) in stack.levels.iter().enumerate() {
            let want = tape.shape(bound.var(self.project[l].kernel))[2];
            if level.shape()[2] != want {
                return invalid(format!("level {} has {} maps, expected {want}", l + 1, level.shape()[2]));
            }
            let x = tape.constant(level.clone())?;
            p[l] = Some(self.project[l].forward_relu(tape, bound, x)?);
        }
        let [p1, p2, p3] = p.map(|v| v.expect("every level projected"));
        let top = tape.concat(&[p3, p2])?;
        let top = self.merge_high.forward_relu(tape, bound, top)?;
        let all = tape.concat(&[top, p1])?;
        self.merge_low.forward_relu(tape, bound, all)
    }
}
