//! Keypoints, person instances and the keypoint-similarity metric.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Self { x, y, visible }
    }

    pub fn dist(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box `(x0, y0, x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, k: &Keypoint) -> bool {
        k.x >= self.x0 && k.x <= self.x1 && k.y >= self.y0 && k.y <= self.y1
    }

    /// Reorders corners so that `x0 <= x1` and `y0 <= y1`.
    pub fn canonical(self) -> Self {
        Self {
            x0: self.x0.min(self.x1),
            y0: self.y0.min(self.y1),
            x1: self.x0.max(self.x1),
            y1: self.y0.max(self.y1),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// One person: `K` keypoints, a box and an area, in whatever units the
/// caller uses (pixels in annotations, normalized inside the model).
#[derive(Clone, Debug, PartialEq)]
pub struct PersonInstance {
    pub keypoints: Vec<Keypoint>,
    pub bbox: BBox,
    pub area: f64,
}

impl PersonInstance {
    /// Derives box and area from the visible keypoints.
    pub fn from_keypoints(keypoints: Vec<Keypoint>, margin: f64) -> Result<Self> {
        let bbox = bbox_from_keypoints(&keypoints, margin)?;
        Ok(Self {
            keypoints,
            area: bbox.area(),
            bbox,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn num_visible(&self) -> usize {
        self.keypoints.iter().filter(|k| k.visible).count()
    }

    /// Scale used by the similarity metric.
    pub fn scale(&self) -> f64 {
        self.area.sqrt()
    }
}

/// Per-keypoint fall-off constants.
#[derive(Clone, Debug, PartialEq)]
pub struct KsParams {
    kappa: Vec<f64>,
}

impl KsParams {
    pub fn new(kappa: Vec<f64>) -> Result<Self> {
        if kappa.is_empty() || kappa.iter().any(|&k| !(k > 0.0) || !k.is_finite()) {
            return Err(Error::Argument(format!(
                "fall-off constants must be positive: {kappa:?}"
            )));
        }
        Ok(Self { kappa })
    }

    pub fn uniform(num_keypoints: usize, kappa: f64) -> Result<Self> {
        Self::new(vec![kappa; num_keypoints])
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }
}

/// Divides every coordinate by `max(img_w, img_h)` and the area by its square.
///
/// Visible keypoints must lie inside the image. Invisible ones may sit
/// outside (truncated limbs) and are clamped into the unit square.
pub fn normalize_instance(raw: &PersonInstance, img_w: f64, img_h: f64) -> Result<PersonInstance> {
    if !(img_w > 0.0 && img_h > 0.0) {
        return Err(Error::Argument(format!("image size {img_w}x{img_h}")));
    }
    let div = img_w.max(img_h);
    let mut keypoints = Vec::with_capacity(raw.keypoints.len());
    for (i, k) in raw.keypoints.iter().enumerate() {
        if k.visible && !(k.x >= 0.0 && k.x <= img_w && k.y >= 0.0 && k.y <= img_h) {
            return Err(Error::Argument(format!(
                "visible keypoint {i} at ({}, {}) outside {img_w}x{img_h}",
                k.x, k.y
            )));
        }
        let (x, y) = (k.x / div, k.y / div);
        let (x, y) = if k.visible {
            (x, y)
        } else {
            (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
        };
        keypoints.push(Keypoint::new(x, y, k.visible));
    }
    let b = raw.bbox;
    Ok(PersonInstance {
        keypoints,
        bbox: BBox::new(b.x0 / div, b.y0 / div, b.x1 / div, b.y1 / div),
        area: raw.area / (div * div),
    })
}

/// `exp(-d^2 / (2 s^2 kappa^2))`.
pub fn keypoint_similarity(d: f64, s: f64, kappa: f64) -> Result<f64> {
    if !(s > 0.0) || !(kappa > 0.0) || !(d >= 0.0) {
        return Err(Error::Argument(format!(
            "similarity needs d>=0, s>0, kappa>0 (d={d}, s={s}, kappa={kappa})"
        )));
    }
    Ok(ks_unchecked(d * d, s, kappa))
}

#[inline]
pub(crate) fn ks_unchecked(d2: f64, s: f64, kappa: f64) -> f64 {
    (-d2 / (2.0 * s * s * kappa * kappa)).exp()
}

/// Mean similarity over the ground truth's visible keypoints, with the
/// ground-truth scale `sqrt(area)`.
pub fn instance_oks(pred: &PersonInstance, gt: &PersonInstance, params: &KsParams) -> Result<f64> {
    let k = gt.keypoints.len();
    if pred.keypoints.len() != k || params.len() != k {
        return Err(Error::Dimension(format!(
            "oks over {} predicted, {} ground-truth keypoints and {} fall-offs",
            pred.keypoints.len(),
            k,
            params.len()
        )));
    }
    if !(gt.area > 0.0) {
        return Err(Error::DegenerateInstance(format!("ground-truth area {}", gt.area)));
    }
    Ok(oks_points(
        pred.keypoints.iter().map(|p| (p.x, p.y)),
        gt,
        params.kappa(),
    ))
}

/// Similarity of raw predicted points against a validated ground truth.
pub(crate) fn oks_points(pred: impl Iterator<Item = (f64, f64)>, gt: &PersonInstance, kappa: &[f64]) -> f64 {
    let s = gt.scale();
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut exact = true;
    for ((px, py), (g, &kap)) in pred.zip(gt.keypoints.iter().zip(kappa)) {
        if g.visible {
            let d2 = (px - g.x).powi(2) + (py - g.y).powi(2);
            sum += ks_unchecked(d2, s, kap);
            n += 1;
        } else if px != g.x || py != g.y {
            exact = false;
        }
    }
    if n == 0 {
        return if exact { 1.0 } else { 0.0 };
    }
    sum / n as f64
}

/// Tight box over visible keypoints, grown on every side by `margin` times
/// the tight box's diagonal.
pub fn bbox_from_keypoints(keypoints: &[Keypoint], margin: f64) -> Result<BBox> {
    let mut vis = keypoints.iter().filter(|k| k.visible).peekable();
    if vis.peek().is_none() {
        return Err(Error::DegenerateInstance("no visible keypoint".into()));
    }
    let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in vis {
        b.x0 = b.x0.min(k.x);
        b.y0 = b.y0.min(k.y);
        b.x1 = b.x1.max(k.x);
        b.y1 = b.y1.max(k.y);
    }
    let grow = margin * b.width().hypot(b.height());
    Ok(BBox::new(b.x0 - grow, b.y0 - grow, b.x1 + grow, b.y1 + grow))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person(points: &[(f64, f64)], area: f64) -> PersonInstance {
        let keypoints: Vec<_> = points.iter().map(|&(x, y)| Keypoint::new(x, y, true)).collect();
        PersonInstance {
            bbox: bbox_from_keypoints(&keypoints, 0.0).unwrap(),
            keypoints,
            area,
        }
    }

    #[test]
    fn normalize_examples() {
        let raw = person(&[(320.0, 160.0)], 400.0);
        let n = normalize_instance(&raw, 640.0, 640.0).unwrap();
        assert_eq!((n.keypoints[0].x, n.keypoints[0].y), (0.5, 0.25));
        assert_eq!(n.area, 400.0 / (640.0 * 640.0));

        let raw = person(&[(100.0, 50.0)], 1.0);
        let n = normalize_instance(&raw, 200.0, 100.0).unwrap();
        assert_eq!((n.keypoints[0].x, n.keypoints[0].y), (0.5, 0.25));

        assert!(matches!(normalize_instance(&raw, 0.0, 100.0), Err(Error::Argument(_))));
        assert!(normalize_instance(&person(&[(300.0, 5.0)], 1.0), 200.0, 100.0).is_err());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(keypoint_similarity(0.0, 1.0, 0.1).unwrap(), 1.0);
        let d = 0.1 * (2.0 * 2f64.ln()).sqrt();
        assert!((d - 0.117741).abs() < 1e-6);
        assert!((keypoint_similarity(d, 1.0, 0.1).unwrap() - 0.5).abs() < 1e-12);
        let v = keypoint_similarity(1.0, 1.0, 0.1).unwrap();
        assert!((v / (-50f64).exp() - 1.0).abs() < 1e-12);
        assert!((v - 1.93e-22).abs() < 0.01e-22);
        assert!(keypoint_similarity(0.1, 0.0, 0.1).is_err());
        assert!(keypoint_similarity(0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn oks_examples() {
        let kp = KsParams::uniform(2, 0.1).unwrap();
        let gt = person(&[(0.2, 0.2), (0.6, 0.8)], 0.25);
        assert_eq!(instance_oks(&gt, &gt, &kp).unwrap(), 1.0);

        let r = 0.5 * 0.1 * (2.0 * 2f64.ln()).sqrt();
        let both = person(&[(0.2 + r, 0.2), (0.6, 0.8 - r)], 0.25);
        assert!((instance_oks(&both, &gt, &kp).unwrap() - 0.5).abs() < 1e-12);
        let one = person(&[(0.2, 0.2), (0.6, 0.8 - r)], 0.25);
        assert!((instance_oks(&one, &gt, &kp).unwrap() - 0.75).abs() < 1e-12);

        let mut flat = gt.clone();
        flat.area = 0.0;
        assert!(matches!(
            instance_oks(&gt, &flat, &kp),
            Err(Error::DegenerateInstance(_))
        ));
    }

    #[test]
    fn oks_without_visible_keypoints() {
        let kp = KsParams::uniform(1, 0.1).unwrap();
        let mut gt = person(&[(0.3, 0.3)], 0.1);
        gt.keypoints[0].visible = false;
        assert_eq!(instance_oks(&gt, &gt, &kp).unwrap(), 1.0);
        let mut moved = gt.clone();
        moved.keypoints[0].x = 0.31;
        assert_eq!(instance_oks(&moved, &gt, &kp).unwrap(), 0.0);
    }

    #[test]
    fn bbox_examples() {
        let single = [Keypoint::new(0.4, 0.3, true), Keypoint::new(0.9, 0.9, false)];
        let b = bbox_from_keypoints(&single, 0.0).unwrap();
        assert_eq!(b, BBox::new(0.4, 0.3, 0.4, 0.3));
        assert_eq!(b.area(), 0.0);

        let two = [Keypoint::new(0.2, 0.2, true), Keypoint::new(0.6, 0.8, true)];
        assert_eq!(bbox_from_keypoints(&two, 0.0).unwrap(), BBox::new(0.2, 0.2, 0.6, 0.8));
        let grown = bbox_from_keypoints(&two, 0.1).unwrap();
        let g = 0.1 * 0.52f64.sqrt();
        for (a, b) in grown.to_array().iter().zip([0.2 - g, 0.2 - g, 0.6 + g, 0.8 + g]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((grown.x0 - 0.127889).abs() < 1e-6);

        let none = [Keypoint::new(0.2, 0.2, false)];
        assert!(matches!(
            bbox_from_keypoints(&none, 0.0),
            Err(Error::DegenerateInstance(_))
        ));
    }
}
