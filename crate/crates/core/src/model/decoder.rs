//! Decoder stack producing one prediction per layer.

use std::sync::Arc;

use rand::Rng;

use super::attention::{
    across_instance_attention, init_attn, position_embedding, within_instance_attention, AttnWeights,
};
use super::deformable::{deformable_attention, init_deform, DeformWeights};
use super::encoder::FeaturePyramid;
use super::heads::{fdr_refine, layer_bin_range, pose_lqe};
use super::params::{Bound, Init, Initializer};
use super::query::{with_instance_position, QuerySet};
use super::{LayerPrediction, ModelConfig};
use crate::error::{Error, Result};
use crate::numeric::{AttnMask, Float, Graph, Var};

/// Prior probability of a positive detection at initialization.
const PRIOR_PROB: f64 = 0.01;

pub(crate) fn init<R: Rng>(p: &mut Initializer<'_, R>, cfg: &ModelConfig) {
    let d = cfg.hidden_dim;
    let k = cfg.num_keypoints;
    p.mlp("prepose", d, d, 2, Init::Zeros);
    for l in 0..cfg.decoder_layers {
        let pre = format!("dec{l}");
        init_attn(p, &format!("{pre}.within"), d);
        init_attn(p, &format!("{pre}.across"), d);
        init_deform(p, &format!("{pre}.cross"), d, cfg.deform_geometry());
        p.mlp(&format!("{pre}.ffn"), d, cfg.ffn_dim, d, Init::Xavier);
        p.norm(&format!("{pre}.ffn_norm"), d);
        p.mlp(&format!("{pre}.fdr"), d, d, 2 * cfg.bins, Init::Zeros);
        p.matrix(&format!("{pre}.cls.w"), d, 1, Init::Scaled(0.1));
        let bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        p.vector(&format!("{pre}.cls.b"), vec![bias as f32]);
        p.linear(&format!("{pre}.lqe"), k * cfg.k_lqe, 1, Init::Zeros);
    }
}

/// Initial `[I, K+1, D]` state: each instance's content vector plus a
/// learned per-slot embedding.
fn initial_state<T: Float>(g: &mut Graph<T>, w: &Bound, content: Var, i: usize, k: usize) -> Result<Var> {
    let d = g.shape(content)[1];
    let rows: Vec<usize> = (0..i).flat_map(|n| std::iter::repeat(n).take(k + 1)).collect();
    let c = g.gather(content, &rows)?;
    let slots: Vec<usize> = (0..i).flat_map(|_| 0..k + 1).collect();
    let j = g.gather(w.get("query.joint")?, &slots)?;
    let h = g.add(c, j)?;
    g.reshape(h, &[i, k + 1, d])
}

/// Runs every decoder layer. `mask` spans all instances of `queries`.
pub fn decoder_forward<T: Float>(
    g: &mut Graph<T>,
    w: &Bound,
    cfg: &ModelConfig,
    pyramid: &FeaturePyramid,
    queries: &QuerySet,
    mask: &Arc<AttnMask>,
) -> Result<Vec<LayerPrediction>> {
    let i = queries.num_instances();
    let k = cfg.num_keypoints;
    let d = cfg.hidden_dim;
    if g.shape(queries.positions) != [i, k + 1, 2] {
        return Err(Error::Dimension(format!(
            "positional queries {:?}, expected {:?}",
            g.shape(queries.positions),
            [i, k + 1, 2]
        )));
    }
    let geo = cfg.deform_geometry();
    let (map, map_shape) = pyramid.highest();
    let mut h = initial_state(g, w, queries.content, i, k)?;
    let mut positions = queries.positions;
    let mut out = Vec::with_capacity(cfg.decoder_layers);
    for l in 0..cfg.decoder_layers {
        let pre = format!("dec{l}");
        let pos = position_embedding(g, w, positions, cfg.pos_freqs)?;
        h = within_instance_attention(g, &AttnWeights::bind(w, &format!("{pre}.within"))?, h, pos, cfg.heads)?;
        h = across_instance_attention(
            g,
            &AttnWeights::bind(w, &format!("{pre}.across"))?,
            h,
            pos,
            mask,
            cfg.heads,
        )?;

        let flat = g.reshape(h, &[i * (k + 1), d])?;
        let reference = g.reshape(positions, &[i * (k + 1), 2])?;
        let cross = DeformWeights::bind(w, &format!("{pre}.cross"))?;
        let a = deformable_attention(g, &cross, flat, reference, &pyramid.levels, &pyramid.shapes, geo)?;
        let r = g.add(flat, a)?;
        let flat = cross.norm.forward(g, r)?;
        let f = w.mlp(&format!("{pre}.ffn"))?.forward(g, flat)?;
        let r = g.add(flat, f)?;
        let flat = w.norm(&format!("{pre}.ffn_norm"))?.forward(g, r)?;
        h = g.reshape(flat, &[i, k + 1, d])?;

        let tokens = g.narrow(h, 1, 0, k)?;
        let instance = g.narrow(h, 1, k, 1)?;
        let instance = g.reshape(instance, &[i, d])?;
        let mut prev = g.narrow(positions, 1, 0, k)?;
        if l == 0 {
            let delta = w.mlp("prepose")?.forward(g, tokens)?;
            let moved = g.add(prev, delta)?;
            prev = g.clamp(moved, 0.0, 1.0);
        }
        let bins = w.mlp(&format!("{pre}.fdr"))?.forward(g, tokens)?;
        let fdr_logits = g.reshape(bins, &[i, k, 2, cfg.bins])?;
        let keypoints = fdr_refine(g, fdr_logits, prev, layer_bin_range(cfg.bin_range, l))?;
        let logits = w.linear(&format!("{pre}.cls"))?.forward(g, instance)?;
        let logits = g.reshape(logits, &[i])?;
        let lqe = w.linear(&format!("{pre}.lqe"))?;
        let refined_logits = pose_lqe(g, keypoints, map, map_shape, logits, cfg.k_lqe, &lqe)?;
        out.push(LayerPrediction {
            keypoints,
            logits,
            refined_logits,
            fdr_logits,
        });
        positions = with_instance_position(g, keypoints)?;
    }
    Ok(out)
}
