//! Maps between unconstrained raw parameters and their activated values.

use serde::{Deserialize, Serialize};

use super::factor::{packed_entries, packed_len, LowerTriangular};
use crate::error::{Error, Result};

/// Diagonal factor entries below this are treated as singular.
pub const DEGENERATE_DIAGONAL: f64 = 1e-30;

/// Off-diagonal factor entries are clamped to `±OFFDIAG_LIMIT` before `logit`.
pub const OFFDIAG_LIMIT: f64 = 1.0 - 1e-6;

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

/// How the scalar amplitude of a component is activated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmpMode {
    /// `exp(raw)`, for unbounded radiance.
    Brightness,
    /// `sigmoid(raw)`, bounded to (0, 1).
    Opacity,
}

impl AmpMode {
    #[inline]
    pub fn activate(self, raw: f64) -> f64 {
        match self {
            AmpMode::Brightness => raw.exp(),
            AmpMode::Opacity => sigmoid(raw),
        }
    }

    /// Derivative of the activation, written in terms of the activated value.
    #[inline]
    pub fn derivative(self, activated: f64) -> f64 {
        match self {
            AmpMode::Brightness => activated,
            AmpMode::Opacity => activated * (1.0 - activated),
        }
    }

    pub fn inverse(self, activated: f64) -> f64 {
        match self {
            AmpMode::Brightness => activated.ln(),
            AmpMode::Opacity => logit(activated),
        }
    }

    /// Default materialization threshold for this mode.
    pub fn default_threshold(self) -> f64 {
        match self {
            AmpMode::Brightness => 0.01,
            AmpMode::Opacity => 0.1,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            AmpMode::Brightness => 0,
            AmpMode::Opacity => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(AmpMode::Brightness),
            1 => Some(AmpMode::Opacity),
            _ => None,
        }
    }
}

/// Activated color channels.
#[inline]
pub fn activate_color(raw: &[f64; 3]) -> [f64; 3] {
    [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])]
}

/// Activates packed raw factor entries: `exp` on the diagonal, `2·sigmoid − 1` below it.
pub fn activate_cholesky(raw: &[f64], n_dims: usize) -> Result<LowerTriangular> {
    if raw.len() != packed_len(n_dims) {
        return Err(Error::DimensionMismatch {
            expected: packed_len(n_dims),
            got: raw.len(),
        });
    }
    let mut out = Vec::with_capacity(raw.len());
    for (entry, ((i, j), &r)) in packed_entries(n_dims).zip(raw).enumerate() {
        if !r.is_finite() {
            return Err(Error::InvalidParameter {
                component: None,
                block: "chol",
                entry,
                value: r,
            });
        }
        out.push(if i == j { r.exp() } else { 2.0 * sigmoid(r) - 1.0 });
    }
    Ok(LowerTriangular::from_packed(n_dims, out))
}

/// Derivative of each activated factor entry with respect to its raw value.
pub fn cholesky_activation_derivative(raw: &[f64], activated: &LowerTriangular) -> Vec<f64> {
    let n = activated.n();
    packed_entries(n)
        .zip(raw)
        .zip(activated.packed())
        .map(|(((i, j), &r), &a)| {
            if i == j {
                a
            } else {
                let s = sigmoid(r);
                2.0 * s * (1.0 - s)
            }
        })
        .collect()
}

/// Inverts [`activate_cholesky`]. Off-diagonal entries outside the open interval
/// (−1, 1) are clamped; the number of clamped entries is returned alongside.
pub fn deactivate_cholesky(factor: &LowerTriangular) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let raw = packed_entries(factor.n())
        .zip(factor.packed())
        .map(|((i, j), &v)| {
            if i == j {
                v.ln()
            } else {
                let c = v.clamp(-OFFDIAG_LIMIT, OFFDIAG_LIMIT);
                if c != v {
                    clamped += 1;
                }
                logit((c + 1.0) / 2.0)
            }
        })
        .collect();
    (raw, clamped)
}
