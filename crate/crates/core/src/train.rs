//! Optimization loop: per-image losses averaged over a batch, global-norm
//! clipping and AdamW updates, with a metric trace.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{eval_ap, ApReport, Dataset, ScoredPose};
use crate::denoise::{build_dn_layout, DnLayout, NoisySample};
use crate::error::{Error, Result};
use crate::geometry::{KsParams, PersonInstance};
use crate::losses::{total_loss_with_targets, DnTargets, LossBreakdown, LossConfig, LossTargets};
use crate::model::{Bound, PoseModel};
use crate::numeric::{grad_check_coords, Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Iteration from which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop: Option<usize>,
    pub lr_drop_factor: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Denoising groups per image; 0 disables pose denoising.
    pub dn_groups: usize,
    /// Upper bound on denoising queries per image.
    pub max_dn_queries: usize,
    /// Record a trace entry after the first iteration and every this many.
    pub log_every: usize,
    /// Evaluate on the held-out split every this many iterations; 0 only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_drop: None,
            lr_drop_factor: 0.1,
            grad_clip: 0.1,
            dn_groups: 5,
            max_dn_queries: 100,
            log_every: 10,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.grad_clip >= 0.0)
            || !(self.eps > 0.0)
            || !(self.lr_drop_factor >= 0.0)
        {
            return Err(Error::Config(
                "lr, weight_decay and grad_clip must be non-negative, eps positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the metric trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub grad_norm: f64,
    /// Batch-averaged loss terms.
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub eval: Option<ApReport>,
}

/// Loss of one image. Returns the graph so callers can differentiate.
#[allow(clippy::too_many_arguments)]
pub fn image_loss<T: Float, R: Rng>(
    model: &PoseModel,
    image: &Tensor<f32>,
    gts: &[PersonInstance],
    dn_groups: usize,
    max_dn_queries: usize,
    loss_cfg: &LossConfig,
    ks: &KsParams,
    rng: &mut R,
) -> Result<(Graph<T>, Bound, Var, LossBreakdown)> {
    let groups = DnLayout::effective_groups(dn_groups, gts.len(), max_dn_queries);
    let (layout, samples) = build_dn_layout(gts, groups, ks, rng)?;
    let mut g = Graph::<T>::new();
    let w = model.params.bind(&mut g);
    let (loss, breakdown, _) = forward_loss(&mut g, &w, model, image, gts, &layout, &samples, loss_cfg, ks, None)?;
    Ok((g, w, loss, breakdown))
}

#[allow(clippy::too_many_arguments)]
fn forward_loss<T: Float>(
    g: &mut Graph<T>,
    w: &Bound,
    model: &PoseModel,
    image: &Tensor<f32>,
    gts: &[PersonInstance],
    layout: &DnLayout,
    samples: &[NoisySample],
    loss_cfg: &LossConfig,
    ks: &KsParams,
    fixed: Option<&LossTargets>,
) -> Result<(Var, LossBreakdown, LossTargets)> {
    let out = model.forward(g, w, image, layout, samples)?;
    let dn = DnTargets { layout, samples };
    total_loss_with_targets(g, &out, gts, Some(dn), loss_cfg, ks, fixed)
}

/// Finite-difference agreement of one weight block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

/// Compares reverse-mode gradients of the full training loss of one image
/// with central differences in `f64`, probing up to `coords_per_block`
/// coordinates of every weight block. Matching and quality targets are
/// taken at the unperturbed weights and held fixed, as in training.
#[allow(clippy::too_many_arguments)]
pub fn model_grad_check(
    model: &PoseModel,
    image: &Tensor<f32>,
    gts: &[PersonInstance],
    dn_groups: usize,
    loss_cfg: &LossConfig,
    ks: &KsParams,
    coords_per_block: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = DnLayout::effective_groups(dn_groups, gts.len(), usize::MAX);
    let (layout, samples) = build_dn_layout(gts, groups, ks, &mut rng)?;
    let targets = {
        let mut g = Graph::<f64>::new();
        let w = model.params.bind(&mut g);
        forward_loss(&mut g, &w, model, image, gts, &layout, &samples, loss_cfg, ks, None)?.2
    };
    let mut out = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        let n = t.numel();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_block.min(n));
        coords.sort_unstable();
        let r = grad_check_coords(
            |g, x| {
                let mut w = model.params.bind(g);
                w.replace(name, x)?;
                let fixed = Some(&targets);
                Ok(forward_loss(g, &w, model, image, gts, &layout, &samples, loss_cfg, ks, fixed)?.0)
            },
            &t.cast::<f64>(),
            eps,
            &coords,
        )?;
        out.push(BlockCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel: r.max_rel,
            max_abs: r.max_abs,
        });
    }
    Ok(out)
}

/// Final-layer predictions for every scene, in pixel units.
pub fn predict_dataset(model: &PoseModel, data: &Dataset) -> Result<Vec<ScoredPose>> {
    let mut out = Vec::new();
    for (img, ann) in data.images.iter().zip(&data.annotations) {
        let scale = ann.width.max(ann.height) as f64;
        for p in model.predict(img)? {
            out.push(ScoredPose {
                image_id: ann.id,
                keypoints: p.keypoints.iter().map(|&(x, y)| (x * scale, y * scale)).collect(),
                score: p.score,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(model: &PoseModel, data: &Dataset, ks: &KsParams) -> Result<ApReport> {
    eval_ap(&predict_dataset(model, data)?, &data.annotations, ks)
}

fn average(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut avg = LossBreakdown::default();
    for p in parts {
        if avg.layers.len() < p.layers.len() {
            avg.layers.resize(p.layers.len(), Default::default());
        }
        for (a, l) in avg.layers.iter_mut().zip(&p.layers) {
            a.ksvf += l.ksvf / n;
            a.keypoint_l1 += l.keypoint_l1 / n;
            a.oks_term += l.oks_term / n;
            a.dn_ksvf += l.dn_ksvf / n;
            a.dn_keypoint_l1 += l.dn_keypoint_l1 / n;
        }
        let (a, l) = (&mut avg.encoder, &p.encoder);
        a.ksvf += l.ksvf / n;
        a.keypoint_l1 += l.keypoint_l1 / n;
        a.oks_term += l.oks_term / n;
        a.dn_ksvf += l.dn_ksvf / n;
        a.dn_keypoint_l1 += l.dn_keypoint_l1 / n;
        avg.total += p.total / n;
    }
    avg
}

/// AdamW state for every named weight.
#[derive(Clone, Debug)]
pub struct AdamW {
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(model: &PoseModel) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; weight decay skips vectors (biases, norms).
    pub fn update(&mut self, model: &mut PoseModel, grads: &BTreeMap<String, Vec<f32>>, cfg: &TrainConfig) {
        let lr = match cfg.lr_drop {
            Some(at) if self.step >= at as u64 => cfg.lr * cfg.lr_drop_factor,
            _ => cfg.lr,
        };
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, t) in model.params.iter_mut() {
            let Some(gr) = grads.get(name) else { continue };
            let decay = if t.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = self.m.get_mut(name).expect("state per weight");
            let v = self.v.get_mut(name).expect("state per weight");
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let gi = gr[i] as f64;
                let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps) + decay * *p as f64;
                *p = (*p as f64 - lr * step) as f32;
            }
        }
    }
}

/// Trains `model` in place. `on_record` sees every trace entry as it is
/// produced; the full trace is also returned.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &mut PoseModel,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    ks: &KsParams,
    train: &Dataset,
    val: Option<&Dataset>,
    seed: u64,
    mut on_record: impl FnMut(&TraceRecord) -> Result<()>,
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let gts: Vec<Vec<PersonInstance>> = (0..train.len()).map(|i| train.normalized(i)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(model);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for it in 0..cfg.iterations {
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut parts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled");
            let (g, w, loss, breakdown) = image_loss::<f32, _>(
                model,
                &train.images[i],
                &gts[i],
                cfg.dn_groups,
                cfg.max_dn_queries,
                loss_cfg,
                ks,
                &mut rng,
            )?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {it}, scene {}: {}",
                    train.annotations[i].id,
                    serde_json::to_string(&breakdown).unwrap_or_default()
                )));
            }
            let back = g.backward(loss)?;
            for (name, &var) in w.iter() {
                if let Some(gr) = back.get(var) {
                    let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; gr.len()]);
                    for (a, &b) in acc.iter_mut().zip(gr) {
                        *a += b / cfg.batch_size as f32;
                    }
                }
            }
            parts.push(breakdown);
        }
        let norm = grads
            .values()
            .flatten()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at iteration {it}")));
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = (cfg.grad_clip / norm) as f32;
            grads.values_mut().flatten().for_each(|v| *v *= s);
        }
        opt.update(model, &grads, cfg);

        let last = it + 1 == cfg.iterations;
        let eval_now = last || (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0);
        if it == 0 || (it + 1) % cfg.log_every == 0 || eval_now {
            let eval = match val {
                Some(v) if eval_now && !v.is_empty() => Some(evaluate(model, v, ks)?),
                _ => None,
            };
            let rec = TraceRecord {
                iteration: it,
                grad_norm: norm,
                loss: average(&parts),
                eval,
            };
            on_record(&rec)?;
            trace.push(rec);
        }
    }
    Ok(trace)
}
