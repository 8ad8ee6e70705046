//! Positive/negative denoising queries and the attention mask that keeps
//! them apart from the matching queries.
//!
//! Pose queries are built by drawing a target similarity per keypoint,
//! inverting the similarity metric to get a displacement length, and moving
//! the keypoint that far in a uniformly random direction.

use std::f64::consts::TAU;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Keypoint, KsParams, PersonInstance};
use crate::numeric::AttnMask;

/// Similarity band for positive pose queries, `[lo, hi)`.
pub const POSITIVE_KS: Range<f64> = 0.5..1.0;
/// Similarity band for negative pose queries, `[lo, hi)`.
pub const NEGATIVE_KS: Range<f64> = 0.1..0.5;
/// Default box noise scale.
pub const LAMBDA_BOX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn ks_band(self) -> Range<f64> {
        match self {
            Polarity::Positive => POSITIVE_KS,
            Polarity::Negative => NEGATIVE_KS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    /// Perturbed copy of the source instance (box and area kept from the source).
    pub instance: PersonInstance,
    pub polarity: Polarity,
    /// Target similarity drawn for each keypoint.
    pub sampled_ks: Vec<f64>,
    pub source_gt: usize,
}

impl NoisySample {
    /// Mean drawn similarity over the source's visible keypoints.
    pub fn mean_visible_ks(&self, source: &PersonInstance) -> f64 {
        let (sum, n) = self
            .sampled_ks
            .iter()
            .zip(&source.keypoints)
            .filter(|(_, k)| k.visible)
            .fold((0.0, 0usize), |(s, n), (&ks, _)| (s + ks, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxSample {
    pub bbox: BBox,
    pub polarity: Polarity,
    /// `[alpha_height, alpha_width]` for the top-left and bottom-right corners.
    pub alphas: [[f64; 2]; 2],
}

/// Displacement length whose similarity is exactly `ks`:
/// `s * kappa * sqrt(-2 ln ks)`.
pub fn alpha_from_ks(ks: f64, s: f64, kappa: f64) -> Result<f64> {
    if !(ks > 0.0 && ks <= 1.0) {
        return Err(Error::Argument(format!("similarity {ks} outside (0, 1]")));
    }
    if !(s > 0.0) || !(kappa > 0.0) {
        return Err(Error::Argument(format!(
            "scale {s} and fall-off {kappa} must be positive"
        )));
    }
    Ok(s * kappa * (-2.0 * ks.ln()).sqrt())
}

/// True when no pose query drawn from `gt` can reach the border of the unit
/// square, so none gets clamped. Clamped keypoints make the loss non-smooth.
pub fn queries_stay_inside(gt: &PersonInstance, params: &KsParams) -> Result<bool> {
    let s = gt.scale();
    for (k, &kappa) in gt.keypoints.iter().zip(params.kappa()) {
        let reach = alpha_from_ks(NEGATIVE_KS.start, s, kappa)?;
        if [k.x, k.y].iter().any(|&v| v <= reach || v >= 1.0 - reach) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Uniformly random unit vector.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let theta = rng.gen_range(0.0..TAU);
    (theta.cos(), theta.sin())
}

/// Draws one pose query around `gt`: every keypoint is displaced so that its
/// similarity to the source equals a value drawn from the polarity's band,
/// then clamped to the unit square.
pub fn gen_pose_queries<R: Rng + ?Sized>(
    gt: &PersonInstance,
    polarity: Polarity,
    params: &KsParams,
    rng: &mut R,
) -> Result<NoisySample> {
    if gt.num_visible() == 0 {
        return Err(Error::DegenerateInstance(
            "pose query source has no visible keypoint".into(),
        ));
    }
    if params.len() != gt.num_keypoints() {
        return Err(Error::Dimension(format!(
            "{} fall-offs for {} keypoints",
            params.len(),
            gt.num_keypoints()
        )));
    }
    let s = gt.scale();
    if !(s > 0.0) {
        return Err(Error::DegenerateInstance(format!("source area {}", gt.area)));
    }
    let band = polarity.ks_band();
    let mut keypoints = Vec::with_capacity(gt.num_keypoints());
    let mut sampled_ks = Vec::with_capacity(gt.num_keypoints());
    for (k, &kappa) in gt.keypoints.iter().zip(params.kappa()) {
        let ks = rng.gen_range(band.clone());
        let alpha = alpha_from_ks(ks, s, kappa)?;
        let (nx, ny) = unit_vector(rng);
        keypoints.push(Keypoint::new(
            (k.x + alpha * nx).clamp(0.0, 1.0),
            (k.y + alpha * ny).clamp(0.0, 1.0),
            k.visible,
        ));
        sampled_ks.push(ks);
    }
    Ok(NoisySample {
        instance: PersonInstance {
            keypoints,
            bbox: gt.bbox,
            area: gt.area,
        },
        polarity,
        sampled_ks,
        source_gt: 0,
    })
}

fn box_alpha<R: Rng + ?Sized>(polarity: Polarity, lambda: f64, rng: &mut R) -> f64 {
    match polarity {
        Polarity::Positive => rng.gen_range(-lambda..lambda),
        Polarity::Negative => {
            let mag = rng.gen_range(lambda..2.0 * lambda);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        }
    }
}

/// Shifts each corner of `gt_box` independently by `(alpha_w * w, alpha_h * h)`.
/// The result is re-sorted, so large negative draws can cross and shrink the box.
pub fn gen_box_queries<R: Rng + ?Sized>(
    gt_box: BBox,
    polarity: Polarity,
    lambda_box: f64,
    rng: &mut R,
) -> Result<BoxSample> {
    if !(lambda_box > 0.0) {
        return Err(Error::Argument(format!("lambda_box {lambda_box}")));
    }
    if !(gt_box.area() > 0.0) {
        return Err(Error::DegenerateInstance(format!("box {gt_box:?} has no area")));
    }
    let mut alphas = [[0.0; 2]; 2];
    for corner in alphas.iter_mut() {
        corner[0] = box_alpha(polarity, lambda_box, rng);
        corner[1] = box_alpha(polarity, lambda_box, rng);
    }
    Ok(BoxSample {
        bbox: shift_corners(gt_box, alphas),
        polarity,
        alphas,
    })
}

/// Applies corner shifts `[alpha_height, alpha_width]` to a box.
pub fn shift_corners(b: BBox, alphas: [[f64; 2]; 2]) -> BBox {
    let (h, w) = (b.height(), b.width());
    BBox::new(
        b.x0 + alphas[0][1] * w,
        b.y0 + alphas[0][0] * h,
        b.x1 + alphas[1][1] * w,
        b.y1 + alphas[1][0] * h,
    )
    .canonical()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Group(usize),
    Matching,
}

/// Arrangement of denoising queries ahead of the matching queries.
///
/// Group `g` occupies `[g*2n, (g+1)*2n)` with its `n` positives first
/// (one per ground truth, in ground-truth order) followed by `n` negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DnLayout {
    pub groups: usize,
    pub num_gt: usize,
}

impl DnLayout {
    pub fn empty() -> Self {
        Self { groups: 0, num_gt: 0 }
    }

    pub fn group_size(&self) -> usize {
        2 * self.num_gt
    }

    pub fn total_dn_queries(&self) -> usize {
        self.groups * self.group_size()
    }

    pub fn matching_query_offset(&self) -> usize {
        self.total_dn_queries()
    }

    pub fn positive_index(&self, group: usize, gt: usize) -> usize {
        group * self.group_size() + gt
    }

    pub fn negative_index(&self, group: usize, gt: usize) -> usize {
        group * self.group_size() + self.num_gt + gt
    }

    pub fn partition(&self, query: usize) -> Partition {
        if query >= self.total_dn_queries() {
            Partition::Matching
        } else {
            Partition::Group(query / self.group_size())
        }
    }

    /// Polarity and source ground truth of a denoising query.
    pub fn role(&self, query: usize) -> Option<(Polarity, usize)> {
        if query >= self.total_dn_queries() {
            return None;
        }
        let r = query % self.group_size();
        Some(if r < self.num_gt {
            (Polarity::Positive, r)
        } else {
            (Polarity::Negative, r - self.num_gt)
        })
    }

    /// Group count after shrinking so that at most `max_queries` denoising
    /// queries are generated.
    pub fn effective_groups(groups: usize, num_gt: usize, max_queries: usize) -> usize {
        if num_gt == 0 {
            return 0;
        }
        groups.min(max_queries / (2 * num_gt))
    }
}

/// One positive and one negative pose query per ground truth and group,
/// ordered as described on [`DnLayout`].
pub fn build_dn_layout<R: Rng + ?Sized>(
    gts: &[PersonInstance],
    num_groups: usize,
    params: &KsParams,
    rng: &mut R,
) -> Result<(DnLayout, Vec<NoisySample>)> {
    let layout = DnLayout {
        groups: if gts.is_empty() { 0 } else { num_groups },
        num_gt: gts.len(),
    };
    let mut samples = Vec::with_capacity(layout.total_dn_queries());
    for _ in 0..layout.groups {
        for polarity in [Polarity::Positive, Polarity::Negative] {
            for (j, gt) in gts.iter().enumerate() {
                let mut s = gen_pose_queries(gt, polarity, params, rng)?;
                s.source_gt = j;
                samples.push(s);
            }
        }
    }
    Ok((layout, samples))
}

/// Blocks attention between queries of different partitions (each group,
/// and the matching queries) over `total_dn_queries + num_matching` queries.
pub fn build_attention_mask(layout: &DnLayout, num_matching: usize) -> Result<AttnMask> {
    let n = layout.total_dn_queries() + num_matching;
    let mut blocked = Vec::with_capacity(n * n);
    for i in 0..n {
        let pi = layout.partition(i);
        for j in 0..n {
            blocked.push(pi != layout.partition(j));
        }
    }
    AttnMask::new(n, n, blocked)
}
