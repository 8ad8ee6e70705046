//! Training objective: set matching, similarity-weighted classification,
//! keypoint regression and the denoising terms, summed over every decoder
//! layer and the query-selection stage.

mod ksvf;
mod matching;

pub use ksvf::{ksvf_grad, ksvf_logits, ksvf_loss, VfParams, PROB_EPS};
pub use matching::{cls_cost, hungarian_match, keypoint_l1, match_cost, pose_oks, CostWeights, MatchResult};

use serde::{Deserialize, Serialize};

use crate::denoise::{DnLayout, NoisySample, Polarity};
use crate::error::{Error, Result};
use crate::geometry::{KsParams, PersonInstance};
use crate::model::ModelOutput;
use crate::numeric::{Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub vf: VfParams,
    /// Weights inside the matching cost.
    pub matcher: CostWeights,
    /// Weights of the loss terms.
    pub weights: CostWeights,
    /// Extra factor on both denoising terms.
    pub dn_weight: f64,
    /// Also supervise the query-selection proposals.
    pub encoder_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            vf: VfParams::default(),
            matcher: CostWeights::default(),
            weights: CostWeights::default(),
            dn_weight: 1.0,
            encoder_loss: true,
        }
    }
}

/// Unweighted terms of one prediction stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub ksvf: f64,
    pub keypoint_l1: f64,
    pub oks_term: f64,
    pub dn_ksvf: f64,
    pub dn_keypoint_l1: f64,
}

impl LayerLoss {
    pub fn weighted(&self, cfg: &LossConfig) -> f64 {
        let w = &cfg.weights;
        w.cls * self.ksvf
            + w.l1 * self.keypoint_l1
            + w.oks * self.oks_term
            + cfg.dn_weight * (w.cls * self.dn_ksvf + w.l1 * self.dn_keypoint_l1)
    }

    fn is_finite_nonneg(&self) -> bool {
        [
            self.ksvf,
            self.keypoint_l1,
            self.oks_term,
            self.dn_ksvf,
            self.dn_keypoint_l1,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= -1e-12)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// One entry per decoder layer.
    pub layers: Vec<LayerLoss>,
    /// Query-selection stage; all zero when disabled.
    pub encoder: LayerLoss,
    pub total: f64,
}

impl LossBreakdown {
    /// Sum of a term over the decoder layers.
    pub fn sum_layers(&self, f: impl Fn(&LayerLoss) -> f64) -> f64 {
        self.layers.iter().map(f).sum()
    }
}

/// Denoising context of a training sample.
#[derive(Clone, Copy, Debug)]
pub struct DnTargets<'a> {
    pub layout: &'a DnLayout,
    pub samples: &'a [NoisySample],
}

/// Assignment and quality targets chosen for one prediction stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTargets {
    /// `(matching query, ground truth)` pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Classification target of every matching query.
    pub q: Vec<f64>,
}

/// Targets of every stage. They are computed from prediction values and
/// act as constants in the graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTargets {
    pub layers: Vec<StageTargets>,
    pub encoder: Option<StageTargets>,
}

struct Accum<T: Float> {
    total: Option<Var>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Float> Accum<T> {
    fn new() -> Self {
        Self {
            total: None,
            _t: std::marker::PhantomData,
        }
    }

    fn push(&mut self, g: &mut Graph<T>, term: Var, weight: f64) -> Result<f64> {
        let value = g.value(term).item().as_f64();
        if weight != 0.0 {
            let t = g.scale(term, weight);
            self.total = Some(match self.total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
        Ok(value)
    }

    fn finish(self, g: &mut Graph<T>) -> Var {
        self.total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())))
    }
}

fn read_poses<T: Float>(g: &Graph<T>, keypoints: Var, start: usize, count: usize) -> Vec<Vec<(f64, f64)>> {
    let k = g.shape(keypoints)[1];
    let d = g.data(keypoints);
    (start..start + count)
        .map(|i| {
            (0..k)
                .map(|j| (d[(i * k + j) * 2].as_f64(), d[(i * k + j) * 2 + 1].as_f64()))
                .collect()
        })
        .collect()
}

/// Sums over `(query, target)` pairs of the mean visible L1 distance and
/// of `1 - oks`, both differentiable in the predicted keypoints.
fn regression_terms<T: Float>(
    g: &mut Graph<T>,
    keypoints: Var,
    queries: &[usize],
    targets: &[&PersonInstance],
    ks: &KsParams,
    with_oks: bool,
) -> Result<(Var, Option<Var>)> {
    let k = g.shape(keypoints)[1];
    let p = queries.len();
    let mut target = Vec::with_capacity(p * k * 2);
    let mut w_l1 = Vec::with_capacity(p * k * 2);
    let mut w_oks = Vec::with_capacity(p * k);
    let mut coef = Vec::with_capacity(p * k);
    let mut counted = 0usize;
    for gt in targets {
        if gt.keypoints.len() != k {
            return Err(Error::Dimension(format!(
                "ground truth with {} keypoints, predictions have {k}",
                gt.keypoints.len()
            )));
        }
        let nvis = gt.num_visible();
        let inv = if nvis == 0 { 0.0 } else { 1.0 / nvis as f64 };
        if nvis > 0 {
            counted += 1;
        }
        let s2 = gt.area;
        for (kp, &kap) in gt.keypoints.iter().zip(ks.kappa()) {
            target.push(T::of(kp.x));
            target.push(T::of(kp.y));
            let w = if kp.visible { inv } else { 0.0 };
            w_l1.push(T::of(w));
            w_l1.push(T::of(w));
            w_oks.push(T::of(w));
            coef.push(T::of(-1.0 / (2.0 * s2 * kap * kap)));
        }
    }
    let pred = g.gather(keypoints, queries)?;
    let tgt = g.constant(Tensor::new(&[p, k, 2], target)?);
    let diff = g.sub(pred, tgt)?;
    let a = g.abs(diff);
    let wl = g.constant(Tensor::new(&[p, k, 2], w_l1)?);
    let l1 = g.mul(a, wl)?;
    let l1 = g.sum(l1);
    if !with_oks {
        return Ok((l1, None));
    }
    let sq = g.square(diff);
    let d2 = g.sum_axis(sq, 2)?;
    let c = g.constant(Tensor::new(&[p, k], coef)?);
    let e = g.mul(d2, c)?;
    let e = g.exp(e);
    let wo = g.constant(Tensor::new(&[p, k], w_oks)?);
    let oks = g.mul(e, wo)?;
    let oks = g.sum(oks);
    let term = g.scale(oks, -1.0);
    let term = g.add_scalar(term, counted as f64);
    Ok((l1, Some(term)))
}

/// Loss of one stage whose first `num_dn` instances are denoising queries.
#[allow(clippy::too_many_arguments)]
fn stage_loss<T: Float>(
    g: &mut Graph<T>,
    keypoints: Var,
    logits: Var,
    num_dn: usize,
    gts: &[PersonInstance],
    dn: Option<DnTargets<'_>>,
    cfg: &LossConfig,
    ks: &KsParams,
    acc: &mut Accum<T>,
    fixed: Option<&StageTargets>,
) -> Result<(LayerLoss, StageTargets)> {
    let total = g.shape(logits)[0];
    let num_matching = total - num_dn;
    let norm = gts.len().max(1) as f64;
    let w = cfg.weights;
    let mut out = LayerLoss::default();

    let chosen = match fixed {
        Some(t) => {
            if t.q.len() != num_matching || t.pairs.iter().any(|&(p, j)| p >= num_matching || j >= gts.len()) {
                return Err(Error::Dimension("fixed targets do not fit this stage".into()));
            }
            t.clone()
        }
        None => {
            let poses = read_poses(g, keypoints, num_dn, num_matching);
            let lv: Vec<f64> = g.data(logits)[num_dn..].iter().map(|v| v.as_f64()).collect();
            let matched = if gts.is_empty() {
                MatchResult {
                    pairs: Vec::new(),
                    unmatched_predictions: (0..num_matching).collect(),
                }
            } else {
                hungarian_match(&match_cost(&poses, &lv, gts, ks, &cfg.matcher)?)?
            };
            let mut q = vec![0.0; num_matching];
            for &(p, t) in &matched.pairs {
                q[p] = pose_oks(&poses[p], &gts[t], ks)?.clamp(0.0, 1.0);
            }
            StageTargets {
                pairs: matched.pairs,
                q,
            }
        }
    };
    let q = &chosen.q;
    let matched = &chosen;
    let ml = g.narrow(logits, 0, num_dn, num_matching)?;
    let cls = ksvf_logits(g, ml, q, &cfg.vf)?;
    let cls = g.sum(cls);
    let cls = g.scale(cls, 1.0 / norm);
    out.ksvf = acc.push(g, cls, w.cls)?;

    if !matched.pairs.is_empty() {
        let queries: Vec<usize> = matched.pairs.iter().map(|&(p, _)| num_dn + p).collect();
        let targets: Vec<&PersonInstance> = matched.pairs.iter().map(|&(_, t)| &gts[t]).collect();
        let (l1, oks) = regression_terms(g, keypoints, &queries, &targets, ks, true)?;
        let l1 = g.scale(l1, 1.0 / norm);
        out.keypoint_l1 = acc.push(g, l1, w.l1)?;
        let oks = g.scale(oks.expect("requested"), 1.0 / norm);
        out.oks_term = acc.push(g, oks, w.oks)?;
    }

    if let Some(dn) = dn {
        if num_dn > 0 {
            let layout = dn.layout;
            let dn_norm = norm * layout.groups.max(1) as f64;
            let mut q = vec![0.0; num_dn];
            let mut pos_queries = Vec::new();
            let mut pos_targets = Vec::new();
            for (i, qi) in q.iter_mut().enumerate() {
                let (polarity, src) = layout
                    .role(i)
                    .ok_or_else(|| Error::Dimension(format!("query {i} outside the denoising layout")))?;
                if polarity == Polarity::Positive {
                    *qi = dn.samples[i].mean_visible_ks(&gts[src]).clamp(0.0, 1.0);
                    pos_queries.push(i);
                    pos_targets.push(&gts[src]);
                }
            }
            let dl = g.narrow(logits, 0, 0, num_dn)?;
            let cls = ksvf_logits(g, dl, &q, &cfg.vf)?;
            let cls = g.sum(cls);
            let cls = g.scale(cls, 1.0 / dn_norm);
            out.dn_ksvf = acc.push(g, cls, cfg.dn_weight * w.cls)?;
            if !pos_queries.is_empty() {
                let (l1, _) = regression_terms(g, keypoints, &pos_queries, &pos_targets, ks, false)?;
                let l1 = g.scale(l1, 1.0 / dn_norm);
                out.dn_keypoint_l1 = acc.push(g, l1, cfg.dn_weight * w.l1)?;
            }
        }
    }
    Ok((out, chosen))
}

/// Total training loss of one image and its per-term breakdown.
///
/// `gts` are normalized instances; `dn` must describe the denoising queries
/// the model was run with (or be `None` when it had none).
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    out: &ModelOutput,
    gts: &[PersonInstance],
    dn: Option<DnTargets<'_>>,
    cfg: &LossConfig,
    ks: &KsParams,
) -> Result<(Var, LossBreakdown)> {
    total_loss_with_targets(g, out, gts, dn, cfg, ks, None).map(|(v, b, _)| (v, b))
}

/// [`total_loss`] that also returns the targets it chose. Passing `fixed`
/// reuses earlier targets instead of matching again.
pub fn total_loss_with_targets<T: Float>(
    g: &mut Graph<T>,
    out: &ModelOutput,
    gts: &[PersonInstance],
    dn: Option<DnTargets<'_>>,
    cfg: &LossConfig,
    ks: &KsParams,
    fixed: Option<&LossTargets>,
) -> Result<(Var, LossBreakdown, LossTargets)> {
    let expected_dn = dn.map_or(0, |d| d.layout.total_dn_queries());
    if out.num_dn != expected_dn || dn.is_some_and(|d| d.samples.len() != expected_dn) {
        return Err(Error::Dimension(format!(
            "model ran {} denoising queries, targets describe {expected_dn}",
            out.num_dn
        )));
    }
    if let Some(d) = dn {
        if d.layout.num_gt != gts.len() && d.layout.groups > 0 {
            return Err(Error::Dimension(format!(
                "denoising layout over {} ground truths, {} given",
                d.layout.num_gt,
                gts.len()
            )));
        }
    }
    let mut acc = Accum::new();
    let mut breakdown = LossBreakdown::default();
    let mut chosen = LossTargets::default();
    if let Some(t) = fixed {
        if t.layers.len() != out.layers.len() || t.encoder.is_some() != cfg.encoder_loss {
            return Err(Error::Dimension("fixed targets do not match the model output".into()));
        }
    }
    for (i, layer) in out.layers.iter().enumerate() {
        let (l, t) = stage_loss(
            g,
            layer.keypoints,
            layer.refined_logits,
            out.num_dn,
            gts,
            dn,
            cfg,
            ks,
            &mut acc,
            fixed.map(|f| &f.layers[i]),
        )?;
        breakdown.layers.push(l);
        chosen.layers.push(t);
    }
    if cfg.encoder_loss {
        let p = &out.proposals;
        let fixed = fixed.and_then(|f| f.encoder.as_ref());
        let (l, t) = stage_loss(g, p.keypoints, p.logits, 0, gts, None, cfg, ks, &mut acc, fixed)?;
        breakdown.encoder = l;
        chosen.encoder = Some(t);
    }
    breakdown.total = breakdown.layers.iter().map(|l| l.weighted(cfg)).sum::<f64>() + breakdown.encoder.weighted(cfg);
    if !breakdown
        .layers
        .iter()
        .chain([&breakdown.encoder])
        .all(LayerLoss::is_finite_nonneg)
    {
        return Err(Error::Numeric(format!("invalid loss terms {breakdown:?}")));
    }
    Ok((acc.finish(g), breakdown, chosen))
}
