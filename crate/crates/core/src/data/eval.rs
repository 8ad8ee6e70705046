//! Keypoint average precision with greedy similarity matching.

use serde::{Deserialize, Serialize};

use super::annotations::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{oks_points, KsParams};

/// Detections kept per image, highest scores first.
pub const MAX_DETECTIONS: usize = 20;

/// A scored pose hypothesis for one scene, in the annotation's units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPose {
    pub image_id: u64,
    pub keypoints: Vec<(f64, f64)>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over similarity thresholds 0.50, 0.55, ..., 0.95.
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    /// Mean over the same thresholds of the final recall.
    #[serde(rename = "AR")]
    pub ar: f64,
}

pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Precision and recall of one threshold, plus its 101-point AP.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdCurve {
    pub threshold: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

/// 101-point interpolated area under a precision/recall sequence ordered by
/// decreasing score.
pub fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        while idx < recall.len() && recall[idx] < target {
            idx += 1;
        }
        if idx < recall.len() {
            sum += env[idx];
        }
    }
    sum / 101.0
}

/// Per-threshold precision/recall curves over all scenes.
pub fn pr_curves(preds: &[ScoredPose], gts: &[Annotation], params: &KsParams) -> Result<Vec<ThresholdCurve>> {
    let thresholds = oks_thresholds();
    let num_gt: usize = gts.iter().map(|a| a.instances.len()).sum();
    // (score, global order, matched flag per threshold)
    let mut records: Vec<(f64, usize, Vec<bool>)> = Vec::new();
    for ann in gts {
        let mut mine: Vec<&ScoredPose> = preds.iter().filter(|p| p.image_id == ann.id).collect();
        mine.sort_by(|a, b| b.score.total_cmp(&a.score));
        mine.truncate(MAX_DETECTIONS);
        let mut oks = Vec::with_capacity(mine.len());
        for p in &mine {
            let mut row = Vec::with_capacity(ann.instances.len());
            for gt in &ann.instances {
                if p.keypoints.len() != gt.keypoints.len() || params.len() != gt.keypoints.len() {
                    return Err(Error::Dimension(format!(
                        "prediction with {} keypoints against ground truth with {}",
                        p.keypoints.len(),
                        gt.keypoints.len()
                    )));
                }
                if !(gt.area > 0.0) {
                    return Err(Error::DegenerateInstance(format!("scene {}: area {}", ann.id, gt.area)));
                }
                row.push(oks_points(p.keypoints.iter().copied(), gt, params.kappa()));
            }
            oks.push(row);
        }
        let mut flags = vec![vec![false; thresholds.len()]; mine.len()];
        for (t, &thr) in thresholds.iter().enumerate() {
            let mut taken = vec![false; ann.instances.len()];
            for (d, row) in oks.iter().enumerate() {
                let mut best: Option<(f64, usize)> = None;
                for (g, &o) in row.iter().enumerate() {
                    if taken[g] || o < thr {
                        continue;
                    }
                    if best.map_or(true, |(b, _)| o > b) {
                        best = Some((o, g));
                    }
                }
                if let Some((_, g)) = best {
                    taken[g] = true;
                    flags[d][t] = true;
                }
            }
        }
        for (p, f) in mine.iter().zip(flags) {
            records.push((p.score, records.len(), f));
        }
    }
    records.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut curves = Vec::with_capacity(thresholds.len());
    for (t, &thr) in thresholds.iter().enumerate() {
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut precision = Vec::with_capacity(records.len());
        let mut recall = Vec::with_capacity(records.len());
        for r in &records {
            if r.2[t] {
                tp += 1;
            } else {
                fp += 1;
            }
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
        }
        let ap = if num_gt == 0 {
            0.0
        } else {
            interpolated_ap(&precision, &recall)
        };
        curves.push(ThresholdCurve {
            threshold: thr,
            precision,
            recall,
            ap,
        });
    }
    Ok(curves)
}

/// Average precision and recall of `preds` against `gts`. Predictions for
/// scenes absent from `gts` are ignored; with no ground truth at all every
/// metric is zero.
pub fn eval_ap(preds: &[ScoredPose], gts: &[Annotation], params: &KsParams) -> Result<ApReport> {
    let curves = pr_curves(preds, gts, params)?;
    let n = curves.len() as f64;
    Ok(ApReport {
        ap: curves.iter().map(|c| c.ap).sum::<f64>() / n,
        ap50: curves[0].ap,
        ap75: curves[5].ap,
        ar: curves
            .iter()
            .map(|c| c.recall.last().copied().unwrap_or(0.0))
            .sum::<f64>()
            / n,
    })
}
