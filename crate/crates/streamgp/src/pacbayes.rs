//! Bounded losses, their closed-form expectations under a Gaussian, and the
//! online PAC-Bayes train objective and test bound.
//!
//! All four losses map into [0, 1], so the loss ceiling `K` is 1. The train
//! bound decomposes as
//!
//! ```text
//! total = sum_i E_{h ~ N(m_i, var_i)}[loss(y_i, h)]   (empirical term)
//!       + KL(new || old) / lambda                     (KL term)
//!       + lambda * m * K^2 / 2 + log(1/delta) / lambda  (constant term)
//! ```
//!
//! and the test bound is the same expression without the KL term.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// The bounded loss families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// `1{|y - yhat| > epsilon}` (strict inequality; the boundary counts as a hit).
    Indicator,
    /// `min(((y - yhat)/epsilon)^2, 1)`.
    ClippedSquare,
    /// `1 - exp(-((y - yhat)/epsilon)^2)`.
    Exp,
    /// `1{yhat outside [y - below, y + above]}`.
    Interval,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(LossKind::Exp),
            "indicator" => Ok(LossKind::Indicator),
            "clip2" => Ok(LossKind::ClippedSquare),
            "interval" => Ok(LossKind::Interval),
            other => Err(Error::input(format!(
                "unknown loss kind {other:?} (expected exp|indicator|clip2|interval)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Exp => "exp",
            LossKind::Indicator => "indicator",
            LossKind::ClippedSquare => "clip2",
            LossKind::Interval => "interval",
        }
    }
}

/// Which bounded loss to use, its scale, and the interval offsets for the
/// interval kind. Loss values live in [0, ceiling_k] with `ceiling_k = 1`.
///
/// The interval bounds are parameterized as offsets from the target:
/// `r-(y) = y - interval_below`, `r+(y) = y + interval_above`; the defaults
/// reproduce the epsilon-band indicator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub epsilon: f64,
    pub interval_below: f64,
    pub interval_above: f64,
    pub ceiling_k: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, epsilon: f64) -> Result<Self> {
        let spec = LossSpec {
            kind,
            epsilon,
            interval_below: epsilon,
            interval_above: epsilon,
            ceiling_k: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The default loss of the online objective: exp kind with
    /// `epsilon^2 = 0.01`.
    pub fn default_exp() -> Self {
        LossSpec::new(LossKind::Exp, 0.1).expect("static spec is valid")
    }

    /// Interval loss with asymmetric offsets around the target.
    pub fn interval(below: f64, above: f64) -> Result<Self> {
        let spec = LossSpec {
            kind: LossKind::Interval,
            epsilon: 0.5 * (below + above),
            interval_below: below,
            interval_above: above,
            ceiling_k: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::input(format!("loss epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.interval_below + self.interval_above <= 0.0 {
            return Err(Error::input(
                "interval loss requires r-(y) < r+(y), i.e. below + above > 0",
            ));
        }
        if self.ceiling_k != 1.0 {
            return Err(Error::input("all four loss kinds map into [0,1]; ceiling_k must be 1"));
        }
        Ok(())
    }

    fn r_minus(&self, y: f64) -> f64 {
        y - self.interval_below
    }

    fn r_plus(&self, y: f64) -> f64 {
        y + self.interval_above
    }
}

/// Pointwise bounded loss in [0, 1].
pub fn loss(spec: &LossSpec, y: f64, yhat: f64) -> f64 {
    let r = (y - yhat) / spec.epsilon;
    match spec.kind {
        LossKind::Indicator => {
            if (y - yhat).abs() > spec.epsilon {
                1.0
            } else {
                0.0
            }
        }
        LossKind::ClippedSquare => (r * r).min(1.0),
        LossKind::Exp => 1.0 - (-r * r).exp(),
        LossKind::Interval => {
            if yhat < spec.r_minus(y) || yhat > spec.r_plus(y) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Standard normal CDF, accurate to well below 1e-12 absolute error.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Closed-form `E_{h ~ N(mean, var)}[loss(y, h)]`.
///
/// At `var = 0` this reduces exactly to `loss(spec, y, mean)`. The exp-kind
/// expectation uses the exponent denominator `2*var + epsilon^2`; the
/// quadrature tests pin this form.
pub fn expected_loss(spec: &LossSpec, y: f64, mean: f64, var: f64) -> Result<f64> {
    if var < 0.0 || !var.is_finite() {
        return Err(Error::input(format!("expected_loss: variance must be >= 0, got {var}")));
    }
    if var == 0.0 {
        return Ok(loss(spec, y, mean));
    }
    let eps = spec.epsilon;
    let sd = var.sqrt();
    let d = y - mean;
    let value = match spec.kind {
        LossKind::Exp => {
            1.0 - (1.0 + 2.0 * var / (eps * eps)).powf(-0.5) * (-d * d / (2.0 * var + eps * eps)).exp()
        }
        LossKind::Indicator => normal_cdf((d - eps) / sd) + 1.0 - normal_cdf((d + eps) / sd),
        LossKind::Interval => {
            normal_cdf((spec.r_minus(y) - mean) / sd) + 1.0 - normal_cdf((spec.r_plus(y) - mean) / sd)
        }
        LossKind::ClippedSquare => {
            // Split at h = y -+ eps: quadratic ramp inside the band, 1 outside.
            let alpha = (d - eps) / sd;
            let beta = (d + eps) / sd;
            let band = normal_cdf(beta) - normal_cdf(alpha);
            (d * d + var) / (eps * eps) * band
                + normal_cdf(alpha)
                + 1.0
                - normal_cdf(beta)
                + sd / (eps * eps) * ((d - eps) * normal_pdf(beta) - (d + eps) * normal_pdf(alpha))
        }
    };
    // The exact expectations live in [0,1]; clamp roundoff at the edges.
    Ok(value.clamp(0.0, 1.0))
}

/// The decomposed train-bound value (objective `J`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    /// Sum of expected bounded losses over the batch.
    pub empirical_term: f64,
    /// `KL / lambda`.
    pub kl_term: f64,
    /// `lambda * m * K^2 / 2 + log(1/delta) / lambda`.
    pub constant_term: f64,
    /// Exact sum of the three terms.
    pub total: f64,
    /// Number of data points counted by the bound.
    pub m: u64,
    pub lambda: f64,
    pub delta: f64,
    /// Loss ceiling used (1 for the built-in losses).
    pub k: f64,
}

fn validate_bound_args(lambda: f64, delta: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::input(format!("lambda must be > 0, got {lambda}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::input(format!("delta must be in (0, 1], got {delta}")));
    }
    Ok(())
}

/// Constant slack `lambda * m * K^2 / 2 + log(1/delta) / lambda`.
pub fn constant_term(m_count: u64, lambda: f64, delta: f64, k: f64) -> f64 {
    lambda * m_count as f64 * k * k / 2.0 + (1.0 / delta).ln() / lambda
}

/// Assembles the train objective from per-point predictions `(y, mean, var)`,
/// the KL between the updated and snapshot posteriors, and the bound
/// parameters.
pub fn train_objective(
    batch_preds: &[(f64, f64, f64)],
    kl: f64,
    m_count: u64,
    lambda: f64,
    delta: f64,
    spec: &LossSpec,
) -> Result<BoundReport> {
    validate_bound_args(lambda, delta)?;
    if kl < -1e-9 || !kl.is_finite() {
        return Err(Error::input(format!("kl must be >= 0, got {kl}")));
    }
    let kl = kl.max(0.0);
    let mut empirical = 0.0;
    for &(y, mean, var) in batch_preds {
        empirical += expected_loss(spec, y, mean, var)?;
    }
    let kl_term = kl / lambda;
    let constant = constant_term(m_count, lambda, delta, spec.ceiling_k);
    Ok(BoundReport {
        empirical_term: empirical,
        kl_term,
        constant_term: constant,
        total: empirical + kl_term + constant,
        m: m_count,
        lambda,
        delta,
        k: spec.ceiling_k,
    })
}

/// The test bound: cumulative empirical loss plus the constant slack, no KL
/// term.
pub fn test_bound(cumulative_empirical: f64, m_count: u64, lambda: f64, delta: f64, k: f64) -> Result<f64> {
    validate_bound_args(lambda, delta)?;
    Ok(cumulative_empirical + constant_term(m_count, lambda, delta, k))
}
