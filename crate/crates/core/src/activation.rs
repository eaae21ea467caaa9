//! Leaky softplus `alpha x + (1 - alpha) ln(1 + e^x)` and the identity map,
//! with first and second derivatives and a numeric inverse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_INVERSE_TOL: f64 = 1e-12;
const MAX_INVERSE_ITERS: usize = 100;
/// Beyond this magnitude softplus switches to its asymptotic forms.
const SOFTPLUS_BRANCH: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActivationError {
    #[error("leaky softplus slope must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("activation inverse did not converge for y = {y} (residual {residual:e})")]
    NoConvergence { y: f64, residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    LeakySoftplus { alpha: f64 },
    Identity,
}

impl ActivationKind {
    pub fn leaky_softplus(alpha: f64) -> Result<Self, ActivationError> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Self::LeakySoftplus { alpha })
        } else {
            Err(ActivationError::InvalidAlpha(alpha))
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Self::Identity => x,
            Self::LeakySoftplus { alpha } => alpha * x + (1.0 - alpha) * softplus(x),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Identity => 1.0,
            Self::LeakySoftplus { alpha } => alpha + (1.0 - alpha) * sigmoid(x),
        }
    }

    #[inline]
    pub fn second_derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Identity => 0.0,
            Self::LeakySoftplus { alpha } => {
                let s = sigmoid(x);
                (1.0 - alpha) * s * (1.0 - s)
            }
        }
    }

    /// `ln phi'(x)`, the per-coordinate log-determinant contribution.
    #[inline]
    pub fn log_derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Identity => 0.0,
            Self::LeakySoftplus { .. } => self.derivative(x).ln(),
        }
    }

    /// Solves `phi(x) = y` for `x` to `|phi(x) - y| <= tol max(1, |y|)`.
    ///
    /// Newton steps are kept inside a bracket that is tightened every
    /// iteration; a step leaving the bracket is replaced by bisection.
    pub fn inverse(&self, y: f64, tol: f64) -> Result<f64, ActivationError> {
        let alpha = match *self {
            Self::Identity => return Ok(y),
            Self::LeakySoftplus { alpha } => alpha,
        };
        let target = tol * y.abs().max(1.0);
        let residual = |x: f64| self.value(x) - y;

        // phi(y) >= y for all y, and phi is increasing with slope in [alpha, 1].
        let mut x = if y >= 0.0 { y } else { y / alpha };
        let mut r = residual(x);
        if r.abs() <= target {
            return Ok(x);
        }

        let (mut lo, mut hi) = (x, x);
        let mut step = 1.0_f64.max(x.abs() * 0.5);
        if r > 0.0 {
            loop {
                lo -= step;
                step *= 2.0;
                if residual(lo) <= 0.0 {
                    break;
                }
            }
        } else {
            loop {
                hi += step;
                step *= 2.0;
                if residual(hi) >= 0.0 {
                    break;
                }
            }
        }

        for _ in 0..MAX_INVERSE_ITERS {
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let newton = x - r / self.derivative(x);
            x = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            r = residual(x);
            if r.abs() <= target {
                return Ok(x);
            }
        }
        Err(ActivationError::NoConvergence { y, residual: r })
    }
}

/// `ln(1 + e^x)` without overflow or loss of precision at either tail.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_BRANCH {
        x + (-x).exp().ln_1p()
    } else if x < -SOFTPLUS_BRANCH {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn act(kind: ActivationKind, x: f64) -> f64 {
    kind.value(x)
}

pub fn act_prime(kind: ActivationKind, x: f64) -> f64 {
    kind.derivative(x)
}

pub fn act_second(kind: ActivationKind, x: f64) -> f64 {
    kind.second_derivative(x)
}

pub fn act_inverse(kind: ActivationKind, y: f64, tol: f64) -> Result<f64, ActivationError> {
    kind.inverse(y, tol)
}
