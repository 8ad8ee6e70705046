//! Query selection: the top-N encoder pixels seed N instances, each with K
//! keypoint queries plus one instance query at their mean.

use rand::Rng;

use super::encoder::FeaturePyramid;
use super::params::{Bound, Init, Initializer};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::{topk, Float, Graph, Tensor, Var};

/// Positional and content queries entering the decoder.
///
/// Instances are ordered denoising first, then matching.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// `[I, K+1, 2]`: K keypoint positions followed by the instance position.
    pub positions: Var,
    /// `[I, D]`, one content vector per instance.
    pub content: Var,
    pub num_dn: usize,
    pub num_matching: usize,
}

impl QuerySet {
    pub fn num_instances(&self) -> usize {
        self.num_dn + self.num_matching
    }
}

/// Encoder-stage guesses that seeded the matching queries.
#[derive(Clone, Debug)]
pub struct Proposals {
    /// `[N, K, 2]`
    pub keypoints: Var,
    /// `[N]` objectness of the selected pixels.
    pub logits: Var,
    pub pixels: Vec<usize>,
}

pub(crate) fn init<R: Rng>(p: &mut Initializer<'_, R>, cfg: &ModelConfig) {
    let (c, d, k) = (cfg.hidden_dim, cfg.hidden_dim, cfg.num_keypoints);
    p.mlp("sel.offset", c, d, 2 * k, Init::Scaled(0.1));
    p.matrix("query.content", cfg.num_queries, d, Init::Scaled(0.5));
    p.matrix("query.joint", k + 1, d, Init::Scaled(0.5));
    p.matrix("query.dn_content", 1, d, Init::Scaled(0.5));
}

/// Appends the instance position (mean of the keypoints) to `[I, K, 2]`.
pub fn with_instance_position<T: Float>(g: &mut Graph<T>, keypoints: Var) -> Result<Var> {
    let s = g.shape(keypoints).to_vec();
    let (i, k) = (s[0], s[1]);
    let sum = g.sum_axis(keypoints, 1)?;
    let mean = g.scale(sum, 1.0 / k as f64);
    let mean = g.reshape(mean, &[i, 1, 2])?;
    g.concat(&[keypoints, mean], 1)
}

/// Picks the `n` highest-scoring pixels and predicts `k` keypoints around each.
pub fn select_queries<T: Float>(
    g: &mut Graph<T>,
    w: &Bound,
    pyramid: &FeaturePyramid,
    n: usize,
    k: usize,
) -> Result<(QuerySet, Proposals)> {
    if n > pyramid.num_pixels() {
        return Err(Error::Bounds(format!(
            "{n} queries requested from {} pixels",
            pyramid.num_pixels()
        )));
    }
    let scores = g.data(pyramid.scores).to_vec();
    let (_, pixels) = topk(&scores, n)?;
    let feats = g.gather(pyramid.all, &pixels)?;
    let logits = g.gather(pyramid.scores, &pixels)?;
    let offsets = w.mlp("sel.offset")?.forward(g, feats)?;
    let offsets = g.reshape(offsets, &[n, k, 2])?;
    let mut centers = Vec::with_capacity(n * k * 2);
    for &p in &pixels {
        let (cx, cy) = pyramid.centers[p];
        for _ in 0..k {
            centers.push(T::of(cx));
            centers.push(T::of(cy));
        }
    }
    let centers = g.constant(Tensor::new(&[n, k, 2], centers)?);
    let kp = g.add(centers, offsets)?;
    let keypoints = g.clamp(kp, 0.0, 1.0);
    let positions = with_instance_position(g, keypoints)?;
    let content = w.get("query.content")?;
    if g.shape(content)[0] != n {
        return Err(Error::Dimension(format!(
            "model has {} content queries, {n} requested",
            g.shape(content)[0]
        )));
    }
    Ok((
        QuerySet {
            positions,
            content,
            num_dn: 0,
            num_matching: n,
        },
        Proposals {
            keypoints,
            logits,
            pixels,
        },
    ))
}

/// Prepends denoising instances at fixed keypoint positions `[n_dn, K, 2]`
/// sharing one learned content vector.
pub fn prepend_denoising<T: Float>(
    g: &mut Graph<T>,
    w: &Bound,
    queries: QuerySet,
    dn_keypoints: Tensor<T>,
) -> Result<QuerySet> {
    let n_dn = dn_keypoints.shape()[0];
    if n_dn == 0 {
        return Ok(queries);
    }
    let kp = g.constant(dn_keypoints);
    let dn_pos = with_instance_position(g, kp)?;
    let positions = g.concat(&[dn_pos, queries.positions], 0)?;
    let dn_content = g.gather(w.get("query.dn_content")?, &vec![0; n_dn])?;
    let content = g.concat(&[dn_content, queries.content], 0)?;
    Ok(QuerySet {
        positions,
        content,
        num_dn: n_dn,
        num_matching: queries.num_matching,
    })
}
