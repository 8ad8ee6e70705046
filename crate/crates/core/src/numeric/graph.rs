//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward sweep. [`Graph::backward`] walks the tape once in reverse.

use std::sync::Arc;

use super::kernels::{gemm, gemm_at, gemm_bt, taps};
use super::tensor::{topk_indices, AttnMask, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    /// elementwise map with its derivative captured during the forward pass
    Pointwise(Var, Vec<T>),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LayerNorm {
        a: Var,
        inv_std: Vec<T>,
    },
    Im2Col {
        a: Var,
        geom: ConvGeom,
    },
    Bilinear {
        map: Var,
        points: Var,
        h: usize,
        w: usize,
    },
    DeformAttn {
        values: Vec<Var>,
        shapes: Vec<(usize, usize)>,
        loc: Var,
        attn: Var,
        heads: usize,
    },
    TopKRows {
        a: Var,
        idx: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor; zeros when no gradient reached it.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: {a:?} vs {b:?}"))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

/// (outer, axis length, inner) split of a shape around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn row_op(&mut self, a: Var, row: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.last_dim();
        if tr.numel() != n {
            return Err(dim_err(name, ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, r[i % n])).collect();
        Tensor::new(ta.shape(), data)
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_op(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies by a vector along the last axis of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_op(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(v, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let ta = self.value(a);
        let v = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect()).unwrap();
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.pointwise(a, |x| (x + c, T::one()))
    }

    /// Elementwise map; `f` returns the value and its derivative.
    pub fn pointwise(&mut self, a: Var, f: impl Fn(T) -> (T, T)) -> Var {
        let ta = self.value(a);
        let mut out = Vec::with_capacity(ta.numel());
        let mut deriv = Vec::with_capacity(ta.numel());
        for &x in ta.data() {
            let (y, d) = f(x);
            out.push(y);
            deriv.push(d);
        }
        let v = Tensor::new(ta.shape(), out).unwrap();
        self.push(v, Op::Pointwise(a, deriv), &[a])
    }

    /// Like [`Graph::pointwise`] but `f` also sees the flat element index.
    pub fn pointwise_indexed(&mut self, a: Var, f: impl Fn(usize, T) -> (T, T)) -> Var {
        let ta = self.value(a);
        let mut out = Vec::with_capacity(ta.numel());
        let mut deriv = Vec::with_capacity(ta.numel());
        for (i, &x) in ta.data().iter().enumerate() {
            let (y, d) = f(i, x);
            out.push(y);
            deriv.push(d);
        }
        let v = Tensor::new(ta.shape(), out).unwrap();
        self.push(v, Op::Pointwise(a, deriv), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.pointwise(a, |x| {
            let s = T::one() / (T::one() + (-x).exp());
            (x * s, s * (T::one() + x * (T::one() - s)))
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.pointwise(a, |x| {
            let s = T::one() / (T::one() + (-x).exp());
            (s, s * (T::one() - s))
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.pointwise(a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.pointwise(a, |x| (x.sin(), x.cos()))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.pointwise(a, |x| (x.cos(), -x.sin()))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.pointwise(a, |x| {
            let d = if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            (x.abs(), d)
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.pointwise(a, |x| (x * x, x + x))
    }

    /// Clamp into `[lo, hi]`; the gradient is passed only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.pointwise(a, |x| {
            if x < lo {
                (lo, T::zero())
            } else if x > hi {
                (hi, T::zero())
            } else {
                (x, T::one())
            }
        })
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.shape().is_empty() || ta.last_dim() != tb.shape()[0] {
            return Err(dim_err("matmul", ta.shape(), tb.shape()));
        }
        let k = tb.shape()[0];
        let n = tb.shape()[1];
        let m = ta.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `a[B, m, k] x b[B, k, n]`, or `x b[B, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("bmm", sa, sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err("bmm", sa, sb));
        }
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            let ad = &ta.data()[i * m * k..(i + 1) * m * k];
            let bd = &tb.data()[i * k * n..(i + 1) * k * n];
            let od = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_bt(ad, bd, od, m, k, n);
            } else {
                gemm(ad, bd, od, m, k, n);
            }
        }
        let v = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(v, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    // ---- shape ops ------------------------------------------------------

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rank = ta.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", ta.shape(), perm));
        }
        let (data, shape) = permute_data(ta.data(), ta.shape(), perm);
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Selects entries of the leading axis; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().is_empty() {
            return Err(Error::Dimension("gather on a scalar".into()));
        }
        let rows = ta.shape()[0];
        let inner = ta.numel() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= rows {
                return Err(Error::Bounds(format!("gather index {i} of {rows}")));
            }
            out.extend_from_slice(&ta.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = idx.len();
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Gather(a, idx.to_vec()), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Dimension("empty concat".into()))?);
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat axis", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(dim_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.shape().len() || start + len > ta.shape()[axis] {
            return Err(Error::Bounds(format!(
                "narrow {:?} axis {axis} [{start}, {})",
                ta.shape(),
                start + len
            )));
        }
        let (outer, n, inner) = split(ta.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Narrow { a, axis, start }, &[a]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.shape().len() {
            return Err(dim_err("sum_axis", ta.shape(), &[axis]));
        }
        let (outer, n, inner) = split(ta.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &ta.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::SumAxis(a, axis), &[a]))
    }

    // ---- normalization --------------------------------------------------

    /// Softmax over the last axis. With a mask, `logits` is `[..., rows, cols]`
    /// and every trailing `rows x cols` block is masked identically; blocked
    /// entries come out as exact zeros and their logits are never read.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&Arc<AttnMask>>) -> Result<Var> {
        let t = self.value(logits);
        let cols = t.last_dim();
        if let Some(m) = mask {
            let s = t.shape();
            if s.len() < 2 || s[s.len() - 1] != m.cols() || s[s.len() - 2] != m.rows() {
                return Err(dim_err("masked_softmax", s, &[m.rows(), m.cols()]));
            }
        }
        let nrows = t.numel() / cols.max(1);
        let mut out = vec![T::zero(); t.numel()];
        for r in 0..nrows {
            let x = &t.data()[r * cols..(r + 1) * cols];
            let y = &mut out[r * cols..(r + 1) * cols];
            let blocked = mask.map(|m| m.row(r % m.rows()));
            let open = |j: usize| blocked.map_or(true, |b| !b[j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in x.iter().enumerate() {
                if open(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                if blocked.is_some_and(|b| b.iter().all(|&v| v)) {
                    return Err(Error::DegenerateMask(r % mask.unwrap().rows()));
                }
                return Err(Error::Numeric("softmax row has no finite logit".into()));
            }
            let mut z = T::zero();
            for j in 0..cols {
                if open(j) {
                    let e = (x[j] - mx).exp();
                    y[j] = e;
                    z += e;
                }
            }
            let inv = T::one() / z;
            for j in 0..cols {
                if open(j) {
                    y[j] *= inv;
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.push(v, Op::Softmax(logits), &[logits]))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        self.masked_softmax(logits, None)
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let rows = t.numel() / n.max(1);
        let nf = T::of(n as f64);
        let mut out = vec![T::zero(); t.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &t.data()[r * n..(r + 1) * n];
            let mean = x.iter().fold(T::zero(), |s, &v| s + v) / nf;
            let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / nf;
            let is = T::one() / (var + T::of(eps)).sqrt();
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(t.shape(), out).unwrap();
        self.push(v, Op::LayerNorm { a, inv_std }, &[a])
    }

    // ---- spatial ops ----------------------------------------------------

    /// Unfolds an `[h*w, c]` (row-major HWC) map into convolution patches
    /// `[out_h*out_w, k*k*c]` with zero padding.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != [geom.h * geom.w, geom.c]
            || geom.k == 0
            || geom.stride == 0
            || geom.h + 2 * geom.pad < geom.k
            || geom.w + 2 * geom.pad < geom.k
        {
            return Err(dim_err("im2col", t.shape(), &[geom.h, geom.w, geom.c, geom.k]));
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = geom.k * geom.k * geom.c;
        let mut out = vec![T::zero(); oh * ow * cols];
        for_each_tap(geom, |o, col, src| {
            let c = geom.c;
            out[o * cols + col..o * cols + col + c].copy_from_slice(&t.data()[src * c..src * c + c]);
        });
        let v = Tensor::new(&[oh * ow, cols], out)?;
        Ok(self.push(v, Op::Im2Col { a, geom }, &[a]))
    }

    /// Bilinear read of an `[h*w, c]` map at normalized `[p, 2]` points (x, y).
    pub fn bilinear_sample(&mut self, map: Var, h: usize, w: usize, points: Var) -> Result<Var> {
        let (tm, tp) = (self.value(map), self.value(points));
        if tm.shape().len() != 2 || tm.shape()[0] != h * w || h == 0 || w == 0 {
            return Err(dim_err("bilinear map", tm.shape(), &[h, w]));
        }
        if tp.last_dim() != 2 {
            return Err(dim_err("bilinear points", tp.shape(), &[2]));
        }
        let c = tm.shape()[1];
        let np = tp.numel() / 2;
        let mut out = vec![T::zero(); np * c];
        for p in 0..np {
            let tp_ = taps(tp.data()[2 * p], tp.data()[2 * p + 1], h, w);
            let o = &mut out[p * c..(p + 1) * c];
            for t in 0..4 {
                let src = &tm.data()[tp_.idx[t] * c..(tp_.idx[t] + 1) * c];
                for (d, &s) in o.iter_mut().zip(src) {
                    *d += tp_.w[t] * s;
                }
            }
        }
        let mut shape = tp.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Bilinear { map, points, h, w }, &[map, points]))
    }

    /// Multi-scale deformable sampling core.
    ///
    /// `values[l]` is `[h_l*w_l, heads*dh]`, `loc` is `[t, heads, levels, points, 2]`
    /// and `attn` is `[t, heads, levels, points]`. Output is `[t, heads*dh]` where each
    /// head's channels are the attention-weighted sum of its bilinear samples.
    pub fn deform_attn(
        &mut self,
        values: &[Var],
        shapes: &[(usize, usize)],
        loc: Var,
        attn: Var,
        heads: usize,
    ) -> Result<Var> {
        let levels = values.len();
        if levels == 0 || shapes.len() != levels {
            return Err(Error::Dimension("deform_attn needs one shape per level".into()));
        }
        let d = self.value(values[0]).last_dim();
        for (l, &v) in values.iter().enumerate() {
            let s = self.shape(v);
            if s != [shapes[l].0 * shapes[l].1, d] {
                return Err(dim_err("deform_attn value", s, &[shapes[l].0, shapes[l].1, d]));
            }
        }
        let (tl, ta) = (self.value(loc), self.value(attn));
        let sa = ta.shape();
        if sa.len() != 4 || sa[1] != heads || sa[2] != levels || d % heads != 0 {
            return Err(dim_err("deform_attn weights", sa, &[heads, levels]));
        }
        let (nt, np) = (sa[0], sa[3]);
        if tl.shape() != [nt, heads, levels, np, 2] {
            return Err(dim_err(
                "deform_attn locations",
                tl.shape(),
                &[nt, heads, levels, np, 2],
            ));
        }
        let dh = d / heads;
        let mut out = vec![T::zero(); nt * d];
        for q in 0..nt {
            for hd in 0..heads {
                let o = &mut out[q * d + hd * dh..q * d + (hd + 1) * dh];
                for l in 0..levels {
                    let (h, w) = shapes[l];
                    let vmap = self.nodes[values[l].0].value.data();
                    for p in 0..np {
                        let s = ((q * heads + hd) * levels + l) * np + p;
                        let a = ta.data()[s];
                        let tp = taps(tl.data()[2 * s], tl.data()[2 * s + 1], h, w);
                        for t in 0..4 {
                            let wt = a * tp.w[t];
                            let src = &vmap[tp.idx[t] * d + hd * dh..tp.idx[t] * d + (hd + 1) * dh];
                            for (dst, &v) in o.iter_mut().zip(src) {
                                *dst += wt * v;
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[nt, d], out)?;
        let mut parents = values.to_vec();
        parents.push(loc);
        parents.push(attn);
        Ok(self.push(
            v,
            Op::DeformAttn {
                values: values.to_vec(),
                shapes: shapes.to_vec(),
                loc,
                attn,
                heads,
            },
            &parents,
        ))
    }

    /// Per-row top-k over the last axis of `[r, c]`, values in descending order.
    pub fn topk_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.last_dim();
        if k > c {
            return Err(Error::Bounds(format!("top-{k} of {c} channels")));
        }
        let rows = t.numel() / c.max(1);
        let mut idx = Vec::with_capacity(rows * k);
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            for i in topk_indices(row, k) {
                idx.push(r * c + i);
                out.push(row[i]);
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::TopKRows { a, idx }, &[a]))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err("backward needs a scalar", self.shape(loss), &[]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // borrow-friendly accumulator
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        for (d, &x) in acc!(v).iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    for (d, &x) in acc!(*a).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if wants(*b) {
                    for (d, &x) in acc!(*b).iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = val(*b).data();
                    for ((d, &x), &y) in acc!(*a).iter_mut().zip(g).zip(bd) {
                        *d += x * y;
                    }
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    for ((d, &x), &y) in acc!(*b).iter_mut().zip(g).zip(ad) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if wants(*a) {
                    for (d, &x) in acc!(*a).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if wants(*r) {
                    let n = val(*r).numel();
                    let dr = acc!(*r);
                    for (i, &x) in g.iter().enumerate() {
                        dr[i % n] += x;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let n = val(*r).numel();
                if wants(*a) {
                    let rd = val(*r).data();
                    for (i, (d, &x)) in acc!(*a).iter_mut().zip(g).enumerate() {
                        *d += x * rd[i % n];
                    }
                }
                if wants(*r) {
                    let ad = val(*a).data();
                    let dr = acc!(*r);
                    for (i, &x) in g.iter().enumerate() {
                        dr[i % n] += x * ad[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, &x) in acc!(*a).iter_mut().zip(g) {
                    *d += x * *c;
                }
            }
            Op::Pointwise(a, deriv) => {
                for ((d, &x), &k) in acc!(*a).iter_mut().zip(g).zip(deriv) {
                    *d += x * k;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.numel() / k.max(1);
                if wants(*a) {
                    gemm_bt(g, tb.data(), acc!(*a), m, n, k);
                }
                if wants(*b) {
                    gemm_at(ta.data(), g, acc!(*b), m, k, n);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                if wants(*a) {
                    let da = acc!(*a);
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm(gi, bi, dai, m, n, k);
                        } else {
                            gemm_bt(gi, bi, dai, m, n, k);
                        }
                    }
                }
                if wants(*b) {
                    let db = acc!(*b);
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // d(b^T) = a^T g  =>  db[n, k] += g^T a
                            gemm_at(gi, ai, dbi, m, n, k);
                        } else {
                            gemm_at(ai, gi, dbi, m, k, n);
                        }
                    }
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inv);
                for (d, x) in acc!(*a).iter_mut().zip(back) {
                    *d += x;
                }
            }
            Op::Reshape(a) => {
                for (d, &x) in acc!(*a).iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::Gather(a, idx) => {
                let inner = node.value.numel() / idx.len().max(1);
                let da = acc!(*a);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &x) in da[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                    {
                        *d += x;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if wants(p) {
                        let dp = acc!(p);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, &x) in dp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let (outer, n, inner) = split(val(*a).shape(), *axis);
                let len = node.value.shape()[*axis];
                let da = acc!(*a);
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    for (d, &x) in da[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += x;
                    }
                }
            }
            Op::SumAll(a) => {
                for d in acc!(*a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = split(val(*a).shape(), *axis);
                let da = acc!(*a);
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            da[(o * n + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.last_dim();
                let da = acc!(*a);
                for r in 0..y.len() / cols.max(1) {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot = ys.iter().zip(gs).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for j in 0..cols {
                        da[r * cols + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let nf = T::of(n as f64);
                let da = acc!(*a);
                for (r, &is) in inv_std.iter().enumerate() {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let mg = gs.iter().fold(T::zero(), |s, &v| s + v) / nf;
                    let mgy = ys.iter().zip(gs).fold(T::zero(), |s, (&p, &q)| s + p * q) / nf;
                    for j in 0..n {
                        da[r * n + j] += is * (gs[j] - mg - ys[j] * mgy);
                    }
                }
            }
            Op::Im2Col { a, geom } => {
                let cols = geom.k * geom.k * geom.c;
                let c = geom.c;
                let da = acc!(*a);
                for_each_tap(*geom, |o, col, src| {
                    for ch in 0..c {
                        da[src * c + ch] += g[o * cols + col + ch];
                    }
                });
            }
            Op::Bilinear { map, points, h, w } => {
                let (tm, tp) = (val(*map), val(*points));
                let c = tm.shape()[1];
                let np = tp.numel() / 2;
                let want_map = wants(*map);
                let want_pts = wants(*points);
                let mut dpts = if want_pts {
                    vec![T::zero(); tp.numel()]
                } else {
                    Vec::new()
                };
                let mut dmap = if want_map { Some(acc!(*map)) } else { None };
                for p in 0..np {
                    let t = taps(tp.data()[2 * p], tp.data()[2 * p + 1], *h, *w);
                    let gp = &g[p * c..(p + 1) * c];
                    for k in 0..4 {
                        let row = t.idx[k] * c;
                        if want_pts {
                            let dot = gp
                                .iter()
                                .zip(&tm.data()[row..row + c])
                                .fold(T::zero(), |s, (&x, &y)| s + x * y);
                            dpts[2 * p] += t.dx[k] * dot;
                            dpts[2 * p + 1] += t.dy[k] * dot;
                        }
                        if let Some(dm) = dmap.as_deref_mut() {
                            for (d, &x) in dm[row..row + c].iter_mut().zip(gp) {
                                *d += t.w[k] * x;
                            }
                        }
                    }
                }
                if want_pts {
                    for (d, x) in acc!(*points).iter_mut().zip(dpts) {
                        *d += x;
                    }
                }
            }
            Op::DeformAttn {
                values,
                shapes,
                loc,
                attn,
                heads,
            } => {
                let (tl, ta) = (val(*loc), val(*attn));
                let levels = values.len();
                let np = ta.shape()[3];
                let nt = ta.shape()[0];
                let d = node.value.last_dim();
                let dh = d / heads;
                let mut dloc = vec![T::zero(); tl.numel()];
                let mut dattn = vec![T::zero(); ta.numel()];
                let mut dvals: Vec<Option<Vec<T>>> = values
                    .iter()
                    .map(|&v| wants(v).then(|| vec![T::zero(); val(v).numel()]))
                    .collect();
                for q in 0..nt {
                    for hd in 0..*heads {
                        let go = &g[q * d + hd * dh..q * d + (hd + 1) * dh];
                        for l in 0..levels {
                            let (h, w) = shapes[l];
                            let vmap = val(values[l]).data();
                            for p in 0..np {
                                let s = ((q * heads + hd) * levels + l) * np + p;
                                let a = ta.data()[s];
                                let tp = taps(tl.data()[2 * s], tl.data()[2 * s + 1], h, w);
                                for t in 0..4 {
                                    let base = tp.idx[t] * d + hd * dh;
                                    let src = &vmap[base..base + dh];
                                    let dot = go.iter().zip(src).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                                    dattn[s] += tp.w[t] * dot;
                                    dloc[2 * s] += a * tp.dx[t] * dot;
                                    dloc[2 * s + 1] += a * tp.dy[t] * dot;
                                    if let Some(dv) = dvals[l].as_mut() {
                                        let wt = a * tp.w[t];
                                        for (dst, &x) in dv[base..base + dh].iter_mut().zip(go) {
                                            *dst += wt * x;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (l, dv) in dvals.into_iter().enumerate() {
                    if let Some(dv) = dv {
                        for (d, x) in acc!(values[l]).iter_mut().zip(dv) {
                            *d += x;
                        }
                    }
                }
                if wants(*loc) {
                    for (d, x) in acc!(*loc).iter_mut().zip(dloc) {
                        *d += x;
                    }
                }
                if wants(*attn) {
                    for (d, x) in acc!(*attn).iter_mut().zip(dattn) {
                        *d += x;
                    }
                }
            }
            Op::TopKRows { a, idx } => {
                let da = acc!(*a);
                for (&i, &x) in idx.iter().zip(g) {
                    da[i] += x;
                }
            }
        }
    }
}

/// Visits every (output pixel, patch column, source pixel) triple of a conv unfold.
fn for_each_tap(geom: ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    for oy in 0..oh {
        for ox in 0..ow {
            let o = oy * ow + ox;
            for ky in 0..geom.k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.h as isize {
                    continue;
                }
                for kx in 0..geom.k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.w as isize {
                        continue;
                    }
                    let col = (ky * geom.k + kx) * geom.c;
                    f(o, col, iy as usize * geom.w + ix as usize);
                }
            }
        }
    }
}
