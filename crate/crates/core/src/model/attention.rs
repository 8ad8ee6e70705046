//! Grouped self-attention over the `[I, K+1, D]` query state.
//!
//! Within-instance attention mixes the K+1 queries of one instance.
//! Across-instance attention mixes the same joint slot over all instances,
//! with denoising groups and matching queries kept apart by a mask.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;

use super::params::{Bound, Init, Initializer, Linear, Norm};
use crate::error::{Error, Result};
use crate::numeric::{AttnMask, Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm: Norm,
}

impl AttnWeights {
    pub fn bind(w: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: w.linear(&format!("{prefix}.q"))?,
            k: w.linear(&format!("{prefix}.k"))?,
            v: w.linear(&format!("{prefix}.v"))?,
            o: w.linear(&format!("{prefix}.o"))?,
            norm: w.norm(&format!("{prefix}.norm"))?,
        })
    }
}

pub(crate) fn init_attn<R: Rng>(p: &mut Initializer<'_, R>, prefix: &str, d: usize) {
    for n in ["q", "k", "v", "o"] {
        p.linear(&format!("{prefix}.{n}"), d, d, Init::Xavier);
    }
    p.norm(&format!("{prefix}.norm"), d);
}

/// Multi-head attention over `[B, S, D]` sequences, queries and keys offset
/// by `pos`. The optional mask is `[S, S]` and shared by every sequence.
pub fn multi_head_attention<T: Float>(
    g: &mut Graph<T>,
    w: &AttnWeights,
    x: Var,
    pos: Var,
    heads: usize,
    mask: Option<&Arc<AttnMask>>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(Error::Dimension(format!("attention input {s:?} with {heads} heads")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let qk_in = g.add(x, pos)?;
    let split_heads = |g: &mut Graph<T>, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[b, n, heads, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[b * heads, n, dh])
    };
    let q = w.q.forward(g, qk_in)?;
    let q = split_heads(g, q)?;
    let k = w.k.forward(g, qk_in)?;
    let k = split_heads(g, k)?;
    let v = w.v.forward(g, x)?;
    let v = split_heads(g, v)?;
    let logits = g.bmm(q, k, true)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let probs = g.masked_softmax(logits, mask)?;
    let out = g.bmm(probs, v, false)?;
    let out = g.reshape(out, &[b, heads, n, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, n, d])?;
    w.o.forward(g, out)
}

fn residual<T: Float>(g: &mut Graph<T>, norm: &Norm, x: Var, delta: Var) -> Result<Var> {
    let r = g.add(x, delta)?;
    norm.forward(g, r)
}

/// Self-attention among the K+1 queries of each instance separately.
pub fn within_instance_attention<T: Float>(
    g: &mut Graph<T>,
    w: &AttnWeights,
    h: Var,
    pos: Var,
    heads: usize,
) -> Result<Var> {
    let a = multi_head_attention(g, w, h, pos, heads, None)?;
    residual(g, &w.norm, h, a)
}

/// Self-attention across instances for each joint slot, with `mask`
/// (over instances) blocking cross-partition pairs.
pub fn across_instance_attention<T: Float>(
    g: &mut Graph<T>,
    w: &AttnWeights,
    h: Var,
    pos: Var,
    mask: &Arc<AttnMask>,
    heads: usize,
) -> Result<Var> {
    let i = g.shape(h)[0];
    if mask.rows() != i || mask.cols() != i {
        return Err(Error::Dimension(format!(
            "mask {}x{} over {i} instances",
            mask.rows(),
            mask.cols()
        )));
    }
    let ht = g.permute(h, &[1, 0, 2])?;
    let pt = g.permute(pos, &[1, 0, 2])?;
    let a = multi_head_attention(g, w, ht, pt, heads, Some(mask))?;
    let a = g.permute(a, &[1, 0, 2])?;
    residual(g, &w.norm, h, a)
}

pub(crate) fn init_pos_embed<R: Rng>(p: &mut Initializer<'_, R>, freqs: usize, d: usize) {
    p.linear("pos.sin", 2 * freqs, d, Init::Xavier);
    p.linear("pos.cos", 2 * freqs, d, Init::Xavier);
    p.linear("pos.out", d, d, Init::Xavier);
}

/// Sinusoidal features of `[.., 2]` positions mapped to `[.., D]`.
pub fn position_embedding<T: Float>(g: &mut Graph<T>, w: &Bound, positions: Var, freqs: usize) -> Result<Var> {
    // columns: x at each frequency, then y at each frequency
    let mut f = vec![T::zero(); 2 * 2 * freqs];
    for k in 0..freqs {
        let omega = T::of(TAU * (1 << k) as f64 / 2.0);
        f[k] = omega;
        f[2 * freqs + freqs + k] = omega;
    }
    let f = g.constant(Tensor::new(&[2, 2 * freqs], f)?);
    let phase = g.matmul(positions, f)?;
    let s = g.sin(phase);
    let c = g.cos(phase);
    let s = w.linear("pos.sin")?.forward(g, s)?;
    let c = w.linear("pos.cos")?.forward(g, c)?;
    let e = g.add(s, c)?;
    let e = g.silu(e);
    w.linear("pos.out")?.forward(g, e)
}
