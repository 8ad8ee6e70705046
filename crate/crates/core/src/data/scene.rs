//! Synthetic scenes of articulated stick figures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{Keypoint, PersonInstance};
use crate::numeric::Tensor;

/// Box margin around the visible keypoints, as a fraction of the diagonal.
pub const BOX_MARGIN: f64 = 0.1;

/// A keypoint tree with a rest pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// `(parent, child)` pairs.
    pub bones: Vec<(usize, usize)>,
    /// Rest position of every node for a figure of unit height, y down.
    pub rest: Vec<(f64, f64)>,
    /// Stroke intensity of each bone.
    pub intensity: Vec<f32>,
}

impl Skeleton {
    /// Seventeen nodes in the usual human keypoint order (nose, eyes, ears,
    /// shoulders, elbows, wrists, hips, knees, ankles; left before right).
    pub fn human17() -> Self {
        let rest = vec![
            (0.0, 0.0),
            (0.03, -0.03),
            (-0.03, -0.03),
            (0.07, -0.01),
            (-0.07, -0.01),
            (0.12, 0.15),
            (-0.12, 0.15),
            (0.17, 0.33),
            (-0.17, 0.33),
            (0.19, 0.5),
            (-0.19, 0.5),
            (0.08, 0.52),
            (-0.08, 0.52),
            (0.09, 0.75),
            (-0.09, 0.75),
            (0.09, 0.98),
            (-0.09, 0.98),
        ];
        let bones = vec![
            (0, 1),
            (0, 2),
            (1, 3),
            (2, 4),
            (0, 5),
            (0, 6),
            (5, 7),
            (7, 9),
            (6, 8),
            (8, 10),
            (5, 11),
            (6, 12),
            (11, 13),
            (13, 15),
            (12, 14),
            (14, 16),
        ];
        let intensity = bones
            .iter()
            .enumerate()
            .map(|(i, &(_, c))| {
                let left = c % 2 == 1;
                let base = if left { 0.95 } else { 0.6 };
                base - 0.02 * (i % 4) as f32
            })
            .collect();
        Self { bones, rest, intensity }
    }

    /// Head, two hands and two feet.
    pub fn star5() -> Self {
        Self {
            bones: vec![(0, 1), (0, 2), (0, 3), (0, 4)],
            rest: vec![(0.0, 0.0), (0.3, 0.4), (-0.3, 0.4), (0.15, 1.0), (-0.15, 1.0)],
            intensity: vec![0.95, 0.55, 0.8, 0.4],
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.rest.len()
    }

    /// Checks that the bones form a tree rooted at node 0, listed so that
    /// every parent is placed before its children.
    pub fn validate(&self) -> Result<()> {
        let k = self.rest.len();
        if k == 0 || self.bones.len() + 1 != k || self.intensity.len() != self.bones.len() {
            return Err(Error::Argument(format!(
                "skeleton with {k} nodes, {} bones and {} intensities is not a tree",
                self.bones.len(),
                self.intensity.len()
            )));
        }
        let mut placed = vec![false; k];
        placed[0] = true;
        for &(p, c) in &self.bones {
            if p >= k || c >= k || !placed[p] || placed[c] {
                return Err(Error::Argument(format!("bone ({p}, {c}) breaks the tree order")));
            }
            placed[c] = true;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub img_size: usize,
    pub max_persons: usize,
    pub skeleton: Skeleton,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(img_size: usize, max_persons: usize, skeleton: Skeleton, seed: u64) -> Result<Self> {
        let s = Self {
            img_size,
            max_persons,
            skeleton,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_size < 64 {
            return Err(Error::Argument(format!("image size {} below 64", self.img_size)));
        }
        if self.max_persons == 0 {
            return Err(Error::Argument("max_persons must be at least 1".into()));
        }
        self.skeleton.validate()
    }
}

/// Random stream for one scene, independent of every other scene.
pub fn scene_rng(seed: u64, scene_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_id);
    rng
}

fn pose<R: Rng>(sk: &Skeleton, size: f64, rng: &mut R) -> Vec<(f64, f64)> {
    let k = sk.num_keypoints();
    let height = rng.gen_range(0.35..0.65) * size;
    let tilt: f64 = rng.gen_range(-0.25..0.25);
    let mut angle = vec![0.0f64; k];
    let mut pts = vec![(0.0, 0.0); k];
    angle[0] = tilt;
    for &(p, c) in &sk.bones {
        angle[c] = angle[p] + rng.gen_range(-0.45..0.45);
        let (dx, dy) = (sk.rest[c].0 - sk.rest[p].0, sk.rest[c].1 - sk.rest[p].1);
        let (s, co) = angle[c].sin_cos();
        pts[c] = (
            pts[p].0 + height * (co * dx - s * dy),
            pts[p].1 + height * (s * dx + co * dy),
        );
    }
    let ox = rng.gen_range(0.05..0.95) * size;
    let oy = rng.gen_range(-0.1..0.7) * size - 0.1 * height;
    pts.iter().map(|&(x, y)| (ox + x, oy + y)).collect()
}

fn background<R: Rng>(size: usize, rng: &mut R) -> Vec<f32> {
    let cell = 16;
    let g = size / cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(0.0..0.25)).collect();
    let mut img = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = (x as f64 + 0.5) / cell as f64;
            let fy = (y as f64 + 0.5) / cell as f64;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let v = grid[y0 * g + x0] * (1.0 - tx) * (1.0 - ty)
                + grid[y0 * g + x0 + 1] * tx * (1.0 - ty)
                + grid[(y0 + 1) * g + x0] * (1.0 - tx) * ty
                + grid[(y0 + 1) * g + x0 + 1] * tx * ty;
            img[y * size + x] = (v + rng.gen_range(0.0..0.05)) as f32;
        }
    }
    img
}

/// Draws an anti-aliased segment, keeping the brighter value per pixel.
fn draw_segment(img: &mut [f32], size: usize, a: (f64, f64), b: (f64, f64), width: f64, value: f32) {
    let r = width / 2.0 + 1.0;
    let lo_x = (a.0.min(b.0) - r).floor().max(0.0) as usize;
    let hi_x = ((a.0.max(b.0) + r).ceil().max(0.0) as usize).min(size);
    let lo_y = (a.1.min(b.1) - r).floor().max(0.0) as usize;
    let hi_y = ((a.1.max(b.1) + r).ceil().max(0.0) as usize).min(size);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = (px - a.0 - t * dx).hypot(py - a.1 - t * dy);
            let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0) as f32;
            let v = value * cover;
            let p = &mut img[y * size + x];
            if v > *p {
                *p = v;
            }
        }
    }
}

fn in_bounds(p: (f64, f64), size: f64) -> bool {
    p.0 >= 0.0 && p.0 <= size && p.1 >= 0.0 && p.1 <= size
}

/// Renders scene `scene_id` of `spec`: a `[S, S]` grayscale image and its
/// pixel-space annotation. Keypoints outside the image are kept with their
/// raw coordinates and marked invisible.
pub fn gen_scene(spec: &SceneSpec, scene_id: u64) -> Result<(Tensor<f32>, Annotation)> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, scene_id);
    let size = spec.img_size;
    let sf = size as f64;
    let sk = &spec.skeleton;
    let mut img = background(size, &mut rng);
    let persons = rng.gen_range(1..=spec.max_persons);
    let mut instances = Vec::with_capacity(persons);
    while instances.len() < persons {
        let pts = pose(sk, sf, &mut rng);
        // a person needs a box with some area, so at least two visible joints
        if pts.iter().filter(|&&p| in_bounds(p, sf)).count() < 2 {
            continue;
        }
        let kps = pts.iter().map(|&p| Keypoint::new(p.0, p.1, in_bounds(p, sf))).collect();
        let person = PersonInstance::from_keypoints(kps, BOX_MARGIN)?;
        if !(person.area > 0.0) {
            continue;
        }
        let width = (sf / 80.0).max(1.5) * rng.gen_range(0.9..1.3);
        for (b, &(p, c)) in sk.bones.iter().enumerate() {
            draw_segment(&mut img, size, pts[p], pts[c], width, sk.intensity[b]);
        }
        // the head node gets a small dot so the root is easy to find
        draw_segment(&mut img, size, pts[0], pts[0], width * 2.2, 1.0);
        instances.push(person);
    }
    let ann = Annotation {
        id: scene_id,
        width: size,
        height: size,
        instances,
    };
    Ok((Tensor::new(&[size, size], img)?, ann))
}
