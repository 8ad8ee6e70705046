use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
///
/// Training runs in `f32`. The gradient checker evaluates the exact same
/// graph code in `f64` so that central differences are not drowned in
/// rounding noise.
pub trait Float:
    num_traits::Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c += a * b` over strided `m x k` and `k x n` operands.
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_row_stride: isize,
    );
}

macro_rules! gemm_impl {
    ($name:ident) => {
        fn gemm_strided(
            m: usize,
            k: usize,
            n: usize,
            a: &[Self],
            (rsa, csa): (isize, isize),
            b: &[Self],
            (rsb, csb): (isize, isize),
            c: &mut [Self],
            rsc: isize,
        ) {
            let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                if rows == 0 || cols == 0 {
                    0
                } else {
                    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                }
            };
            assert!(a.len() >= last(m, k, rsa, csa));
            assert!(b.len() >= last(k, n, rsb, csb));
            assert!(c.len() >= last(m, n, rsc, 1));
            // SAFETY: the asserts above keep every strided access in bounds
            unsafe {
                matrixmultiply::$name(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    1.0,
                    c.as_mut_ptr(),
                    rsc,
                    1,
                )
            }
        }
    };
}

impl Float for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    gemm_impl!(sgemm);
}

impl Float for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    gemm_impl!(dgemm);
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (non-recorded) matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Dimension(format!("matmul {:?} x {:?}", self.shape, other.shape)));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        super::kernels::gemm(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }
}

/// Attention blocking matrix; `true` forbids attention from a row query to a column key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "mask {}x{} given {} entries",
                rows,
                cols,
                blocked.len()
            )));
        }
        let mask = Self { rows, cols, blocked };
        if let Some(r) = (0..rows).find(|&r| mask.row(r).iter().all(|&b| b)) {
            return Err(Error::DegenerateMask(r));
        }
        Ok(mask)
    }

    pub fn unblocked(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            blocked: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.blocked[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_blocked(&self, r: usize, c: usize) -> bool {
        self.blocked[r * self.cols + c]
    }
}

/// The `k` largest entries of `values` in descending order together with
/// their positions. Equal values keep ascending index order.
pub fn topk<T: Float>(values: &[T], k: usize) -> Result<(Vec<T>, Vec<usize>)> {
    if k > values.len() {
        return Err(Error::Bounds(format!(
            "top-{} requested from {} values",
            k,
            values.len()
        )));
    }
    let idx = topk_indices(values, k);
    Ok((idx.iter().map(|&i| values[i]).collect(), idx))
}

pub(crate) fn topk_indices<T: Float>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps smaller index first among ties; NaN sorts last
    idx.sort_by(|&a, &b| {
        let (va, vb) = (values[a], values[b]);
        vb.partial_cmp(&va).unwrap_or_else(|| va.is_nan().cmp(&vb.is_nan()))
    });
    idx.truncate(k);
    idx
}
