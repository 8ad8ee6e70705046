//! Stand-in for a backbone and hybrid encoder: a patchify convolution
//! followed by strided downsampling, three levels at strides 8/16/32.

use rand::Rng;

use super::params::{Bound, Init, Initializer};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::{ConvGeom, Float, Graph, Tensor, Var};

pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `[h_l * w_l, C]` per level, finest first.
    pub levels: Vec<Var>,
    pub shapes: Vec<(usize, usize)>,
    /// All levels stacked as `[sum h_l*w_l, C]`.
    pub all: Var,
    /// Objectness logit per stacked pixel.
    pub scores: Var,
    /// Normalized center of each stacked pixel.
    pub centers: Vec<(f64, f64)>,
}

impl FeaturePyramid {
    pub fn num_pixels(&self) -> usize {
        self.centers.len()
    }

    /// The finest level, used for reading features at keypoints.
    pub fn highest(&self) -> (Var, (usize, usize)) {
        (self.levels[0], self.shapes[0])
    }
}

pub(crate) fn init<R: Rng>(p: &mut Initializer<'_, R>, cfg: &ModelConfig) {
    let c = cfg.hidden_dim;
    p.linear("enc.stem", 8 * 8 * cfg.in_channels, c, Init::Xavier);
    for l in 0..cfg.levels {
        if l > 0 {
            p.linear(&format!("enc.l{l}.down"), 2 * 2 * c, c, Init::Xavier);
        }
        p.linear(&format!("enc.l{l}.ctx"), 3 * 3 * c, c, Init::Xavier);
    }
    p.linear("enc.score", c, 1, Init::Scaled(0.5));
}

fn conv<T: Float>(g: &mut Graph<T>, w: &Bound, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let cols = g.im2col(x, geom)?;
    let y = w.linear(name)?.forward(g, cols)?;
    Ok(g.silu(y))
}

/// Runs the stub encoder on a square `[S, S]` (or `[S, S, C]`) image whose
/// side is a multiple of the coarsest stride.
pub fn encode_stub<T: Float>(
    g: &mut Graph<T>,
    w: &Bound,
    image: &Tensor<f32>,
    cfg: &ModelConfig,
) -> Result<FeaturePyramid> {
    let s = image.shape();
    let channels = if s.len() == 3 { s[2] } else { 1 };
    if s.len() < 2 || s.len() > 3 || s[0] != s[1] {
        return Err(Error::Argument(format!("encoder needs a square image, got {s:?}")));
    }
    if channels != cfg.in_channels {
        return Err(Error::Argument(format!(
            "image has {channels} channels, model expects {}",
            cfg.in_channels
        )));
    }
    let side = s[0];
    let coarsest = STRIDES[cfg.levels - 1];
    if side == 0 || side % coarsest != 0 {
        return Err(Error::Argument(format!(
            "image side {side} not divisible by stride {coarsest}"
        )));
    }
    let c = cfg.hidden_dim;
    let x = g.constant(image.cast::<T>().reshape(&[side * side, channels])?);
    let stem = ConvGeom {
        h: side,
        w: side,
        c: channels,
        k: 8,
        stride: 8,
        pad: 0,
    };
    let mut cur = conv(g, w, "enc.stem", x, stem)?;
    let mut hw = side / 8;
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut shapes = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        if l > 0 {
            let down = ConvGeom {
                h: hw,
                w: hw,
                c,
                k: 2,
                stride: 2,
                pad: 0,
            };
            cur = conv(g, w, &format!("enc.l{l}.down"), cur, down)?;
            hw /= 2;
        }
        let ctx = ConvGeom {
            h: hw,
            w: hw,
            c,
            k: 3,
            stride: 1,
            pad: 1,
        };
        cur = conv(g, w, &format!("enc.l{l}.ctx"), cur, ctx)?;
        levels.push(cur);
        shapes.push((hw, hw));
    }
    let all = g.concat(&levels, 0)?;
    let scores = w.linear("enc.score")?.forward(g, all)?;
    let n = g.value(scores).numel();
    let scores = g.reshape(scores, &[n])?;
    let mut centers = Vec::with_capacity(n);
    for &(h, wd) in &shapes {
        for y in 0..h {
            for x in 0..wd {
                centers.push(((x as f64 + 0.5) / wd as f64, (y as f64 + 0.5) / h as f64));
            }
        }
    }
    Ok(FeaturePyramid {
        levels,
        shapes,
        all,
        scores,
        centers,
    })
}
