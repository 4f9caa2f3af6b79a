//! Per-parameter priors and the log-scale sampling transform.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    /// Unnormalized: log-density 0 inside `[lo, hi]`.
    Uniform {
        lo: f64,
        hi: f64,
    },
    HalfNormal {
        scale: f64,
    },
    InverseGamma {
        shape: f64,
        scale: f64,
    },
    Normal {
        center: f64,
        scale: f64,
    },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Prior::HalfNormal { scale } => scale > 0.0,
            Prior::InverseGamma { shape, scale } => shape > 0.0 && scale > 0.0,
            Prior::Normal { center, scale } => center.is_finite() && scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid prior {self:?}")))
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::HalfNormal { scale } => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (2.0 / (scale * (2.0 * PI).sqrt())).ln() - x * x / (2.0 * scale * scale)
                }
            }
            Prior::InverseGamma { shape, scale } => {
                if x <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    shape * scale.ln() - libm::lgamma(shape) - (shape + 1.0) * x.ln() - scale / x
                }
            }
            Prior::Normal { center, scale } => {
                let z = (x - center) / scale;
                -0.5 * z * z - scale.ln() - 0.5 * (2.0 * PI).ln()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPrior {
    pub name: String,
    pub prior: Prior,
    /// Sample and optimize `ln x` instead of `x`.
    pub log_scale: bool,
    /// Search box for the optimizer, natural units.
    pub bounds: (f64, f64),
}

impl ParameterPrior {
    pub fn new(name: impl Into<String>, prior: Prior, log_scale: bool, bounds: (f64, f64)) -> Result<Self> {
        prior.validate()?;
        let (lo, hi) = bounds;
        if !(lo < hi) || (log_scale && lo <= 0.0) {
            return Err(Error::Validation(format!("invalid search box [{lo}, {hi}]")));
        }
        Ok(Self {
            name: name.into(),
            prior,
            log_scale,
            bounds,
        })
    }

    /// Uniform prior whose search box is its support.
    pub fn uniform(name: impl Into<String>, lo: f64, hi: f64, log_scale: bool) -> Result<Self> {
        Self::new(name, Prior::Uniform { lo, hi }, log_scale, (lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub parameters: Vec<ParameterPrior>,
}

impl PriorSpec {
    pub fn new(parameters: Vec<ParameterPrior>) -> Self {
        Self { parameters }
    }

    pub fn dim(&self) -> usize {
        self.parameters.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.parameters.iter().map(|p| p.name.clone()).collect()
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let mut total = 0.0;
        for (p, &v) in self.parameters.iter().zip(x) {
            total += p.prior.log_density(v);
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        total
    }

    pub fn to_natural(&self, u: &[f64]) -> Vec<f64> {
        self.parameters
            .iter()
            .zip(u)
            .map(|(p, &v)| if p.log_scale { v.exp() } else { v })
            .collect()
    }

    pub fn to_sampling(&self, x: &[f64]) -> Vec<f64> {
        self.parameters
            .iter()
            .zip(x)
            .map(|(p, &v)| if p.log_scale { v.ln() } else { v })
            .collect()
    }

    /// `ln |dx/du|` of the sampling transform at `u`.
    pub fn log_jacobian(&self, u: &[f64]) -> f64 {
        self.parameters
            .iter()
            .zip(u)
            .filter(|(p, _)| p.log_scale)
            .map(|(_, &v)| v)
            .sum()
    }

    /// Optimizer box in sampling coordinates.
    pub fn sampling_bounds(&self) -> Vec<(f64, f64)> {
        self.parameters
            .iter()
            .map(|p| {
                let (lo, hi) = p.bounds;
                if p.log_scale {
                    (lo.ln(), hi.ln())
                } else {
                    (lo, hi)
                }
            })
            .collect()
    }
}
