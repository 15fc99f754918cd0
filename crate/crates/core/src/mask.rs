use symnet_tensor::{kernels, Real, Tensor};

use crate::error::{invalid, Result};

/// Bilinear resize followed by a `>= 0.5` threshold.
pub fn binarize_resized<T: Real>(mask: &Tensor<T>, size: (usize, usize)) -> Result<Tensor<T>> {
    if mask.rank() != 2 {
        return invalid(format!("mask must be H x W, got {:?}", mask.shape()));
    }
    let r = kernels::bilinear_resize(mask, size)?;
    Ok(r.map(|v| if v >= T::of(0.5) { T::one() } else { T::zero() }))
}

/// Row-major indices where `keep` holds.
pub fn positions<T: Real>(map: &Tensor<T>, keep: impl Fn(T) -> bool) -> Vec<usize> {
    map.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| keep(v))
        .map(|(i, _)| i)
        .collect()
}

/// Per-position class labels (0 background, 1 foreground) at `size`.
pub fn targets<T: Real>(mask: &Tensor<T>, size: (usize, usize)) -> Result<Vec<usize>> {
    let b = binarize_resized(mask, size)?;
    Ok(b.data().iter().map(|&v| usize::from(v > T::zero())).collect())
}
