//! Per-sample training objectives on `(target x, prediction μ, log spread s)`.
//!
//! The Laplace and Gaussian losses work on the relative residual
//! `1 − μ/x`, so the spread `exp(s)` is a fraction of the distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Laplace,
    Gaussian,
    L1,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Laplace, LossKind::Gaussian, LossKind::L1];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Laplace => "laplace",
            LossKind::Gaussian => "gaussian",
            LossKind::L1 => "l1",
        }
    }

    /// Loss and its partial derivatives `(L, ∂L/∂μ, ∂L/∂s)`. The caller
    /// guarantees `x > 0`.
    pub fn eval(&self, x: f64, mu: f64, s: f64) -> (f64, f64, f64) {
        match self {
            LossKind::Laplace => {
                let r = 1.0 - mu / x;
                let inv_b = (-s).exp();
                let loss = r.abs() * inv_b + std::f64::consts::LN_2 + s;
                (loss, -sign(r) * inv_b / x, 1.0 - r.abs() * inv_b)
            }
            LossKind::Gaussian => {
                let r = 1.0 - mu / x;
                let inv_var = (-2.0 * s).exp();
                let loss = 0.5 * r * r * inv_var + s;
                (loss, -r * inv_var / x, 1.0 - r * r * inv_var)
            }
            LossKind::L1 => ((x - mu).abs(), -sign(x - mu), 0.0),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(LossKind::Laplace),
            "gaussian" => Ok(LossKind::Gaussian),
            "l1" => Ok(LossKind::L1),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_target(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTarget(x))
    }
}

/// Relative Laplace negative log-likelihood `|1 − μ/x|/b + log(2b)` with
/// `b = exp(s)`.
pub fn laplace_loss(x: f64, mu: f64, s: f64) -> Result<f64> {
    check_target(x)?;
    Ok(LossKind::Laplace.eval(x, mu, s).0)
}

/// Relative Gaussian negative log-likelihood without the constant:
/// `(1 − μ/x)²/(2·exp(2s)) + s`.
pub fn gaussian_loss(x: f64, mu: f64, s: f64) -> Result<f64> {
    check_target(x)?;
    Ok(LossKind::Gaussian.eval(x, mu, s).0)
}

/// Absolute error `|x − μ|`.
pub fn l1_loss(x: f64, mu: f64) -> Result<f64> {
    check_target(x)?;
    Ok(LossKind::L1.eval(x, mu, 0.0).0)
}
