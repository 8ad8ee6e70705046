//! Bipartite assignment of predictions to ground truths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{oks_points, KsParams, PersonInstance};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
}

impl MatchResult {
    /// Ground truth assigned to each prediction, if any.
    pub fn assignment(&self, num_predictions: usize) -> Vec<Option<usize>> {
        let mut a = vec![None; num_predictions];
        for &(p, t) in &self.pairs {
            a[p] = Some(t);
        }
        a
    }
}

/// Relative weights of the classification, L1 and similarity terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub oks: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            oks: 2.0,
        }
    }
}

const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;

/// Focal-style classification cost for a logit: cheap when confident.
pub fn cls_cost(logit: f64) -> f64 {
    let p = (1.0 / (1.0 + (-logit).exp())).clamp(1e-8, 1.0 - 1e-8);
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -p.ln();
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p).ln();
    pos - neg
}

/// Mean over the ground truth's visible keypoints of `|dx| + |dy|`
/// (zero when none is visible).
pub fn keypoint_l1(pred: &[(f64, f64)], gt: &PersonInstance) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, k) in pred.iter().zip(&gt.keypoints) {
        if k.visible {
            sum += (p.0 - k.x).abs() + (p.1 - k.y).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Similarity of a predicted pose against `gt`.
pub fn pose_oks(pred: &[(f64, f64)], gt: &PersonInstance, ks: &KsParams) -> Result<f64> {
    if pred.len() != gt.keypoints.len() || ks.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "{} predicted keypoints against {} ground-truth, {} fall-offs",
            pred.len(),
            gt.keypoints.len(),
            ks.len()
        )));
    }
    if !(gt.area > 0.0) {
        return Err(Error::DegenerateInstance(format!("ground-truth area {}", gt.area)));
    }
    Ok(oks_points(pred.iter().copied(), gt, ks.kappa()))
}

/// Cost of assigning each prediction (rows) to each ground truth (columns).
pub fn match_cost(
    keypoints: &[Vec<(f64, f64)>],
    logits: &[f64],
    gts: &[PersonInstance],
    ks: &KsParams,
    w: &CostWeights,
) -> Result<Vec<Vec<f64>>> {
    if keypoints.len() != logits.len() {
        return Err(Error::Dimension(format!(
            "{} keypoint sets for {} logits",
            keypoints.len(),
            logits.len()
        )));
    }
    let mut cost = Vec::with_capacity(keypoints.len());
    for (kp, &logit) in keypoints.iter().zip(logits) {
        let c = w.cls * cls_cost(logit);
        let mut row = Vec::with_capacity(gts.len());
        for gt in gts {
            let oks = pose_oks(kp, gt, ks)?;
            row.push(c + w.l1 * keypoint_l1(kp, gt) + w.oks * (1.0 - oks));
        }
        cost.push(row);
    }
    Ok(cost)
}

/// Minimum-cost assignment of a rows x cols matrix with `rows <= cols`,
/// returned as the column of each row.
fn solve_wide(a: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[rows[i0 - 1]][cols[j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|r| a[rows[r]][cols[col_of[r]]]).sum();
    (total, col_of)
}

/// Optimal total cost over the given rows and columns of `cost`.
fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        solve_wide(cost, rows, cols).0
    } else {
        let t: Vec<Vec<f64>> = (0..cost[0].len())
            .map(|c| cost.iter().map(|r| r[c]).collect())
            .collect();
        solve_wide(&t, cols, rows).0
    }
}

/// Minimum-cost partial injection of predictions (rows) into ground truths
/// (columns) with `min(rows, cols)` pairs.
///
/// Among optimal assignments (up to a relative tolerance of 1e-9) the one
/// whose pair list, sorted by prediction, is lexicographically smallest is
/// returned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched_predictions: (0..n).collect(),
        });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..m).collect();
    let target = optimum(cost, &all_rows, &cols);
    let tol = 1e-9 * (1.0 + target.abs());
    let mut acc = 0.0;
    let mut pairs = Vec::with_capacity(n.min(m));
    let mut unmatched = Vec::new();
    for i in 0..n {
        if cols.is_empty() {
            unmatched.push(i);
            continue;
        }
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut best: Option<(f64, usize)> = None;
        let mut chosen = None;
        for (ci, &j) in cols.iter().enumerate() {
            let mut others = cols.clone();
            others.remove(ci);
            let val = acc + cost[i][j] + optimum(cost, &rest, &others);
            if val <= target + tol {
                chosen = Some(ci);
                break;
            }
            if best.map_or(true, |(b, _)| val < b) {
                best = Some((val, ci));
            }
        }
        let may_skip = n - i > cols.len();
        if chosen.is_none() && may_skip {
            let skip = acc + optimum(cost, &rest, &cols);
            if skip <= target + tol {
                unmatched.push(i);
                continue;
            }
        }
        let ci = match chosen {
            Some(ci) => ci,
            None if may_skip => {
                // tolerance miss; fall back to the cheaper continuation
                let skip = acc + optimum(cost, &rest, &cols);
                match best {
                    Some((b, ci)) if b <= skip => ci,
                    _ => {
                        unmatched.push(i);
                        continue;
                    }
                }
            }
            None => best.expect("at least one column").1,
        };
        let j = cols.remove(ci);
        acc += cost[i][j];
        pairs.push((i, j));
    }
    Ok(MatchResult {
        pairs,
        unmatched_predictions: unmatched,
    })
}
