//! Similarity-weighted varifocal classification loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Float, Graph, Var};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VfParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for VfParams {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma: 2.0,
        }
    }
}

impl VfParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        let p = Self { alpha, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Argument(format!(
                "varifocal parameters need alpha in (0,1] and gamma >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn clamp_prob(c: f64) -> (f64, bool) {
    if c < PROB_EPS {
        (PROB_EPS, true)
    } else if c > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (c, false)
    }
}

/// Loss for target quality `q` and predicted probability `c`.
///
/// `q > 0`: `-q (q ln c + (1-q) ln(1-c))`; `q = 0`: `-alpha c^gamma ln(1-c)`.
pub fn ksvf_loss(q: f64, c: f64, params: &VfParams) -> f64 {
    let (c, _) = clamp_prob(c);
    if q > 0.0 {
        -q * (q * c.ln() + (1.0 - q) * (1.0 - c).ln())
    } else {
        -params.alpha * c.powf(params.gamma) * (1.0 - c).ln()
    }
}

/// Derivative of [`ksvf_loss`] with respect to `c` (zero where clamped).
pub fn ksvf_grad(q: f64, c: f64, params: &VfParams) -> f64 {
    let (c, clamped) = clamp_prob(c);
    if clamped {
        return 0.0;
    }
    if q > 0.0 {
        -q * (q / c - (1.0 - q) / (1.0 - c))
    } else {
        let (a, gm) = (params.alpha, params.gamma);
        let pow_term = if gm == 0.0 { 0.0 } else { gm * c.powf(gm - 1.0) };
        -a * (pow_term * (1.0 - c).ln() - c.powf(gm) / (1.0 - c))
    }
}

/// Elementwise loss of sigmoid(`logits`) against per-element targets `q`.
pub fn ksvf_logits<T: Float>(g: &mut Graph<T>, logits: Var, q: &[f64], params: &VfParams) -> Result<Var> {
    let n = g.value(logits).numel();
    if q.len() != n {
        return Err(Error::Dimension(format!("{} targets for {n} logits", q.len())));
    }
    if let Some(bad) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("quality target {bad} outside [0, 1]")));
    }
    let params = *params;
    Ok(g.pointwise_indexed(logits, |i, x| {
        let c = 1.0 / (1.0 + (-x.as_f64()).exp());
        let loss = ksvf_loss(q[i], c, &params);
        let d = ksvf_grad(q[i], c, &params) * c * (1.0 - c);
        (T::of(loss), T::of(d))
    }))
}
