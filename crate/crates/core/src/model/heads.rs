//! Prediction heads: distribution-based keypoint refinement and the
//! pose-aware quality estimate added to the classification logit.

use crate::error::{Error, Result};
use crate::numeric::{Float, Graph, Tensor, Var};

use super::params::Linear;

/// `bins` evenly spaced centers from `-range` to `+range`.
pub fn bin_centers(bins: usize, range: f64) -> Vec<f64> {
    match bins {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..bins)
            .map(|i| -range + 2.0 * range * i as f64 / (bins - 1) as f64)
            .collect(),
    }
}

/// Bin range used by decoder layer `layer`: halves at every layer.
pub fn layer_bin_range(initial: f64, layer: usize) -> f64 {
    initial / (1u64 << layer.min(62)) as f64
}

/// Moves `[.., K, 2]` keypoints by the expectation of each axis's bin
/// distribution. `bin_logits` is `[.., K, 2, B]`; results are clamped to
/// the unit square.
pub fn fdr_refine<T: Float>(g: &mut Graph<T>, bin_logits: Var, prev: Var, bin_range: f64) -> Result<Var> {
    let s = g.shape(bin_logits).to_vec();
    let p = g.shape(prev).to_vec();
    if s.len() < 2 || s[s.len() - 2] != 2 || s[..s.len() - 1] != p[..] {
        return Err(Error::Dimension(format!("bin logits {s:?} for keypoints {p:?}")));
    }
    let bins = s[s.len() - 1];
    let centers: Vec<T> = bin_centers(bins, bin_range).into_iter().map(T::of).collect();
    let centers = g.constant(Tensor::new(&[bins, 1], centers)?);
    let probs = g.softmax(bin_logits)?;
    let offset = g.matmul(probs, centers)?;
    let offset = g.reshape(offset, &p)?;
    let moved = g.add(prev, offset)?;
    Ok(g.clamp(moved, 0.0, 1.0))
}

/// Refines `[I]` base logits from features read at `[I, K, 2]` keypoints on
/// the `[h*w, C]` map: the `k_lqe` largest channels per keypoint go through
/// `head` (`K*k_lqe -> 1`) and the result is added to the logit.
pub fn pose_lqe<T: Float>(
    g: &mut Graph<T>,
    keypoints: Var,
    map: Var,
    map_shape: (usize, usize),
    base_logits: Var,
    k_lqe: usize,
    head: &Linear,
) -> Result<Var> {
    let c = g.shape(map)[1];
    if k_lqe > c {
        return Err(Error::Argument(format!("k_lqe {k_lqe} exceeds {c} channels")));
    }
    let s = g.shape(keypoints).to_vec();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::Dimension(format!("keypoints {s:?}, expected [I, K, 2]")));
    }
    let (i, k) = (s[0], s[1]);
    let feats = g.bilinear_sample(map, map_shape.0, map_shape.1, keypoints)?;
    let top = g.topk_rows(feats, k_lqe)?;
    let flat = g.reshape(top, &[i, k * k_lqe])?;
    let q = head.forward(g, flat)?;
    let q = g.reshape(q, &[i])?;
    g.add(base_logits, q)
}
