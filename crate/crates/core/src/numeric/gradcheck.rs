//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so that vanishing gradients are
/// judged by absolute error instead of dividing noise by noise.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
}

impl GradCheck {
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.max_abs = self.max_abs.max(other.max_abs);
        self.max_rel = self.max_rel.max(other.max_rel);
    }
}

fn eval<F>(f: &F, input: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::Dimension(format!(
            "grad_check needs a scalar, got {:?}",
            v.shape()
        )));
    }
    let out = v.item();
    if !out.is_finite() {
        return Err(Error::Numeric(format!("function value {out}")));
    }
    Ok(out)
}

/// Compares the reverse-mode gradient of scalar `f` at `input` against
/// central differences with step `eps`, over every input coordinate.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..input.numel()).collect();
    grad_check_coords(f, input, eps, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, input: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let y = f(&mut g, x)?;
    if !g.value(y).is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    let analytic = g.backward(y)?.tensor(x);
    if !analytic.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let mut report = GradCheck::default();
    let mut probe = input.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        report.record(analytic.data()[i], (up - down) / (2.0 * eps));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let r = grad_check(|g, x| Ok(g.square(x)), &x, 1e-5).unwrap();
        assert!(r.max_rel < 1e-6, "{r:?}");
    }

    #[test]
    fn softmax_sum_is_flat() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.0, 2.0, 0.1]).unwrap();
        let r = grad_check(
            |g, x| {
                let s = g.softmax(x)?;
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_abs < 1e-6, "{r:?}");
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            grad_check(|g, x| Ok(g.square(x)), &x, 0.0),
            Err(Error::Argument(_))
        ));
        let r = grad_check(|g, x| Ok(g.scale(x, f64::INFINITY)), &x, 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
