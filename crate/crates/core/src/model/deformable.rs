//! Multi-scale deformable cross-attention from queries into the pyramid.

use std::f64::consts::TAU;

use rand::Rng;

use super::params::{Bound, Init, Initializer, Linear, Norm};
use crate::error::{Error, Result};
use crate::numeric::{Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct DeformGeometry {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformGeometry {
    fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DeformWeights {
    pub value: Linear,
    pub offset: Linear,
    pub attn: Linear,
    pub out: Linear,
    pub norm: Norm,
}

impl DeformWeights {
    pub fn bind(w: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            value: w.linear(&format!("{prefix}.value"))?,
            offset: w.linear(&format!("{prefix}.offset"))?,
            attn: w.linear(&format!("{prefix}.attn"))?,
            out: w.linear(&format!("{prefix}.out"))?,
            norm: w.norm(&format!("{prefix}.norm"))?,
        })
    }
}

pub(crate) fn init_deform<R: Rng>(p: &mut Initializer<'_, R>, prefix: &str, d: usize, geo: DeformGeometry) {
    p.linear(&format!("{prefix}.value"), d, d, Init::Xavier);
    p.matrix(&format!("{prefix}.offset.w"), d, geo.samples() * 2, Init::Zeros);
    // sampling points start on rays around the reference, one ray per head
    let mut bias = Vec::with_capacity(geo.samples() * 2);
    for h in 0..geo.heads {
        let theta = TAU * h as f64 / geo.heads as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let norm = c.abs().max(s.abs());
        for _ in 0..geo.levels {
            for m in 0..geo.points {
                bias.push((c / norm * (m + 1) as f64) as f32);
                bias.push((s / norm * (m + 1) as f64) as f32);
            }
        }
    }
    p.vector(&format!("{prefix}.offset.b"), bias);
    p.linear(&format!("{prefix}.attn"), d, geo.samples(), Init::Zeros);
    p.linear(&format!("{prefix}.out"), d, d, Init::Xavier);
    p.norm(&format!("{prefix}.norm"), d);
}

/// Samples the pyramid around each reference point.
///
/// `x` is `[T, D]`, `reference` is `[T, 2]`; offsets are predicted in pixel
/// units of each level. Returns `[T, D]` before the residual connection.
pub fn deformable_attention<T: Float>(
    g: &mut Graph<T>,
    w: &DeformWeights,
    x: Var,
    reference: Var,
    levels: &[Var],
    shapes: &[(usize, usize)],
    geo: DeformGeometry,
) -> Result<Var> {
    if levels.len() != geo.levels || shapes.len() != geo.levels {
        return Err(Error::Dimension(format!(
            "{} pyramid levels for {} attention levels",
            levels.len(),
            geo.levels
        )));
    }
    let t = g.shape(x)[0];
    let (hh, ll, mm) = (geo.heads, geo.levels, geo.points);
    let n = geo.samples();

    // broadcast each reference point to all H*L*M slots
    let mut expand = vec![T::zero(); 2 * n * 2];
    for s in 0..n {
        expand[2 * s] = T::one();
        expand[2 * n + 2 * s + 1] = T::one();
    }
    let expand = g.constant(Tensor::new(&[2, 2 * n], expand)?);
    let base = g.matmul(reference, expand)?;

    let mut scale = Vec::with_capacity(2 * n);
    for _ in 0..hh {
        for &(lh, lw) in shapes {
            for _ in 0..mm {
                scale.push(T::of(1.0 / lw as f64));
                scale.push(T::of(1.0 / lh as f64));
            }
        }
    }
    let scale = g.constant(Tensor::new(&[2 * n], scale)?);
    let off = w.offset.forward(g, x)?;
    let off = g.mul_row(off, scale)?;
    let loc = g.add(base, off)?;
    let loc = g.reshape(loc, &[t, hh, ll, mm, 2])?;

    let a = w.attn.forward(g, x)?;
    let a = g.reshape(a, &[t, hh, ll * mm])?;
    let a = g.softmax(a)?;
    let a = g.reshape(a, &[t, hh, ll, mm])?;

    let mut values = Vec::with_capacity(ll);
    for &lv in levels {
        values.push(w.value.forward(g, lv)?);
    }
    let y = g.deform_attn(&values, shapes, loc, a, hh)?;
    w.out.forward(g, y)
}
