//! Raw loops shared by the recorded ops. Reduction order is fixed so that
//! identical inputs always produce identical bits.

use super::tensor::Float;

/// `out[m, n] += a[m, k] * b[k, n]`.
pub(crate) fn gemm<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out, n as isize);
}

/// `out[m, n] += a[m, k] * b[n, k]^T`.
pub(crate) fn gemm_bt<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_strided(m, k, n, a, (k as isize, 1), b, (1, k as isize), out, n as isize);
}

/// `out[k, n] += a[m, k]^T * b[m, n]`.
pub(crate) fn gemm_at<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_strided(k, m, n, a, (1, k as isize), b, (n as isize, 1), out, n as isize);
}

/// Four bilinear taps of a normalized point on an `h x w` grid whose pixel
/// centers sit at `(i + 0.5) / w`. Points outside the centers clamp to the
/// border and get zero positional derivative along the clamped axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<T> {
    pub idx: [usize; 4],
    pub w: [T; 4],
    /// derivative of each weight wrt the normalized x coordinate
    pub dx: [T; 4],
    /// derivative of each weight wrt the normalized y coordinate
    pub dy: [T; 4],
}

#[inline]
fn axis<T: Float>(u: T, size: usize) -> (usize, usize, T, T) {
    let n = T::of(size as f64);
    let hi = T::of(size as f64 - 1.0);
    let p = u * n - T::of(0.5);
    let (p, grad) = if p > T::zero() && p < hi {
        (p, n)
    } else if p <= T::zero() || p.is_nan() {
        (T::zero(), T::zero())
    } else {
        (hi, T::zero())
    };
    let i0 = p.floor().to_usize().unwrap_or(0).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    let f = p - T::of(i0 as f64);
    (i0, i1, f, grad)
}

#[inline]
pub(crate) fn taps<T: Float>(x: T, y: T, h: usize, w: usize) -> Taps<T> {
    let (x0, x1, fx, gx) = axis(x, w);
    let (y0, y1, fy, gy) = axis(y, h);
    let one = T::one();
    Taps {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        w: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
        dx: [-(one - fy) * gx, (one - fy) * gx, -fy * gx, fy * gx],
        dy: [-(one - fx) * gy, -fx * gy, (one - fx) * gy, fx * gy],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        // b transposed is 2x3
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm_bt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // a^T (3x2) * c (2x2)
        let mut d = [0.0; 6];
        gemm_at(&a, &c, &mut d, 2, 3, 2);
        assert_eq!(d[0], a[0] * c[0] + a[3] * c[2]);
    }

    #[test]
    fn taps_sum_to_one_and_hit_nodes() {
        let t = taps(0.3f64, 0.7, 4, 5);
        let s: f64 = t.w.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        // node (row 1, col 2) of a 4x5 grid
        let t = taps(2.5f64 / 5.0, 1.5 / 4.0, 4, 5);
        assert_eq!(t.idx[0], 7);
        assert_eq!(t.w[0], 1.0);
    }
}
