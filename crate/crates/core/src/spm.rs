//! Parameter-free prior mask from self-activated region matching.
//!
//! Works on plain tensors: the prior only feeds thresholded selections and
//! a concatenated input channel, so nothing here is recorded on a tape.

use symnet_tensor::{kernels, Real, Tensor};

use crate::config::SelfActivation;
use crate::error::{invalid, Result};

/// Pooled support/query region features, one pair per window.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSet<T> {
    pub windows: Vec<(usize, usize)>,
    pub support: Vec<Tensor<T>>,
    pub query: Vec<Tensor<T>>,
}

/// `M^pri` and the per-window maps it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMask<T> {
    pub map: Tensor<T>,
    pub per_window: Vec<Tensor<T>>,
}

impl<T: Real> PriorMask<T> {
    /// A flat prior, used when the module is ablated.
    pub fn uniform(h: usize, w: usize, value: T) -> Self {
        Self {
            map: Tensor::full(&[h, w], value),
            per_window: Vec::new(),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.map.shape()[0], self.map.shape()[1])
    }

    /// Element-wise mean over shots.
    pub fn average(shots: &[&PriorMask<T>]) -> Result<Self> {
        let Some(first) = shots.first() else {
            return invalid("cannot average zero prior masks");
        };
        if shots.len() == 1 {
            return Ok((*first).clone());
        }
        let n_windows = first.per_window.len();
        if shots.iter().any(|s| s.map.shape() != first.map.shape() || s.per_window.len() != n_windows) {
            return invalid("prior masks of different shapes cannot be averaged");
        }
        let map = mean_of(shots.iter().map(|s| &s.map))?;
        let per_window = (0..n_windows)
            .map(|w| mean_of(shots.iter().map(|s| &s.per_window[w])))
            .collect::<Result<_>>()?;
        Ok(Self { map, per_window })
    }
}

pub(crate) fn mean_of<'a, T: Real>(mut xs: impl ExactSizeIterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let n = T::of(xs.len() as f64);
    let mut acc = xs.next().expect("at least one tensor").clone();
    for x in xs {
        acc = acc.zip_map(x, |a, b| a + b)?;
    }
    Ok(acc.map(|v| v / n))
}

/// Rejects masks holding anything other than exact 0 and 1.
pub fn check_binary_mask<T: Real>(mask: &Tensor<T>) -> Result<()> {
    if mask.rank() != 2 {
        return invalid(format!("mask must be H x W, got {:?}", mask.shape()));
    }
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return invalid("mask must be binary {0, 1}");
    }
    Ok(())
}

/// Scales each position of an `H x W x C` map by an `H x W` weight.
pub fn weight_positions<T: Real>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    if weights.shape() != [h, w] {
        return invalid(format!("weights {:?} do not match map {:?}", weights.shape(), x.shape()));
    }
    let mut out = x.clone();
    for (row, &m) in out.data_mut().chunks_mut(c).zip(weights.data()) {
        row.iter_mut().for_each(|v| *v *= m);
    }
    Ok(out)
}

/// `r_s = avg_pool(F_s ⊙ resize(M_s))`, `r_q = avg_pool(F_q)`.
pub fn region_features<T: Real>(
    support: &Tensor<T>,
    query: &Tensor<T>,
    mask: &Tensor<T>,
    window: (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_binary_mask(mask)?;
    let (h, w, _) = support.hwc()?;
    if support.shape() != query.shape() {
        return invalid(format!("support {:?} and query {:?} differ", support.shape(), query.shape()));
    }
    let m = kernels::bilinear_resize(mask, (h, w))?;
    let masked = weight_positions(support, &m)?;
    Ok((kernels::avg_pool(&masked, window)?, kernels::avg_pool(query, window)?))
}

fn omega<T: Real>(q: &[T], kernel: SelfActivation) -> T {
    match kernel {
        SelfActivation::InnerProduct => kernels::dot(q, q),
        SelfActivation::L2 => kernels::l2_norm(q),
    }
}

/// Full `HW x HW` matching matrix; rows are query positions, columns support.
pub fn self_activation_scores<T: Real>(rq: &Tensor<T>, rs: &Tensor<T>, kernel: SelfActivation) -> Result<Tensor<T>> {
    let (_, _, c) = rq.hwc()?;
    let (_, _, cs) = rs.hwc()?;
    if c != cs {
        return invalid(format!("channel mismatch: query {c}, support {cs}"));
    }
    let nq = rq.len() / c;
    let ns = rs.len() / c;
    let mut out = Vec::with_capacity(nq * ns);
    for i in 0..nq {
        let q = rq.pixel(i);
        let w = omega(q, kernel);
        for j in 0..ns {
            out.push(kernels::cosine(q, rs.pixel(j))? * w);
        }
    }
    Ok(Tensor::new(vec![nq, ns], out)?)
}

/// Row mean of `S_r`, min-max normalized and reshaped to `H x W`.
pub fn similarity_map<T: Real>(scores: &Tensor<T>, size: (usize, usize)) -> Result<Tensor<T>> {
    if scores.rank() != 2 || scores.shape()[0] != size.0 * size.1 {
        return invalid(format!("scores {:?} do not cover a {}x{} query", scores.shape(), size.0, size.1));
    }
    let n = scores.shape()[1];
    let means = scores
        .data()
        .chunks(n)
        .map(|row| row.iter().copied().sum::<T>() / T::of(n as f64))
        .collect();
    Ok(kernels::minmax_normalize(&Tensor::new(vec![size.0, size.1], means)?)?)
}

fn unit_rows<T: Real>(x: &Tensor<T>, c: usize) -> Vec<T> {
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let n = kernels::l2_norm(row);
        if n < T::eps_norm() {
            row.iter_mut().for_each(|v| *v = T::zero());
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Same map as `similarity_map(self_activation_scores(..))` without forming `S_r`:
/// the row mean of cosines equals the query unit vector against the mean support
/// unit vector.
pub fn window_map<T: Real>(rq: &Tensor<T>, rs: &Tensor<T>, kernel: SelfActivation) -> Result<Tensor<T>> {
    let (h, w, c) = rq.hwc()?;
    if rs.shape() != rq.shape() {
        return invalid(format!("support {:?} and query {:?} regions differ", rs.shape(), rq.shape()));
    }
    let n = h * w;
    let s_hat = unit_rows(rs, c);
    let mut mean_s = vec![T::zero(); c];
    for row in s_hat.chunks(c) {
        mean_s.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    mean_s.iter_mut().for_each(|m| *m /= T::of(n as f64));
    let q_hat = unit_rows(rq, c);
    let means = (0..n)
        .map(|i| kernels::dot(&q_hat[i * c..(i + 1) * c], &mean_s) * omega(rq.pixel(i), kernel))
        .collect();
    Ok(kernels::minmax_normalize(&Tensor::new(vec![h, w], means)?)?)
}

/// Region features for every window.
pub fn region_feature_set<T: Real>(
    support: &Tensor<T>,
    query: &Tensor<T>,
    mask: &Tensor<T>,
    windows: &[(usize, usize)],
) -> Result<RegionFeatureSet<T>> {
    let mut set = RegionFeatureSet {
        windows: windows.to_vec(),
        support: Vec::with_capacity(windows.len()),
        query: Vec::with_capacity(windows.len()),
    };
    for &win in windows {
        let (rs, rq) = region_features(support, query, mask, win)?;
        set.support.push(rs);
        set.query.push(rq);
    }
    Ok(set)
}

/// `M^pri` from high-level features and a binary support mask of any size.
pub fn prior_mask<T: Real>(
    support: &Tensor<T>,
    query: &Tensor<T>,
    mask: &Tensor<T>,
    windows: &[(usize, usize)],
    kernel: SelfActivation,
) -> Result<PriorMask<T>> {
    if windows.is_empty() {
        return invalid("prior mask needs at least one window");
    }
    let regions = region_feature_set(support, query, mask, windows)?;
    let per_window = regions
        .query
        .iter()
        .zip(&regions.support)
        .map(|(rq, rs)| window_map(rq, rs, kernel))
        .collect::<Result<Vec<_>>>()?;
    let map = mean_of(per_window.iter())?;
    Ok(PriorMask { map, per_window })
}
