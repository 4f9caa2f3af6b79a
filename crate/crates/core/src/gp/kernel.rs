use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `n x dim` table of covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    dim: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Contract(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let dim = columns.len();
        let n = columns.first().map_or(0, |c| c.len());
        if dim == 0 || columns.iter().any(|c| c.len() != n) {
            return Err(Error::Contract("covariate columns differ in length".into()));
        }
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.points().map(|p| p[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// Squared exponential.
    Rbf,
    /// Exponential (Ornstein-Uhlenbeck).
    Ou,
    Matern32,
}

impl KernelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Ou => "ou",
            KernelFamily::Matern32 => "matern32",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelFamily::Rbf),
            "ou" => Ok(KernelFamily::Ou),
            "matern32" => Ok(KernelFamily::Matern32),
            other => Err(Error::Parse {
                field: "kernel".into(),
                message: format!("unknown kernel `{other}` (expected rbf, ou or matern32)"),
            }),
        }
    }
}

/// Stationary covariance with marginal std `alpha` and one length-scale per covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub alpha: f64,
    pub rho: Vec<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, alpha: f64, rho: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Validation(format!("kernel alpha {alpha} must be positive")));
        }
        if rho.is_empty() || rho.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Validation(format!(
                "kernel length-scales {rho:?} must be positive and non-empty"
            )));
        }
        Ok(Self { family, alpha, rho })
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    /// Prior variance `k(v, v)`.
    pub fn variance(&self) -> f64 {
        self.alpha * self.alpha
    }

    pub fn eval(&self, v: &[f64], w: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.rho.len());
        debug_assert_eq!(w.len(), self.rho.len());
        let a2 = self.variance();
        match self.family {
            KernelFamily::Rbf => {
                let s: f64 = v
                    .iter()
                    .zip(w)
                    .zip(&self.rho)
                    .map(|((a, b), r)| {
                        let d = (a - b) / r;
                        d * d
                    })
                    .sum();
                a2 * (-0.5 * s).exp()
            }
            KernelFamily::Ou => {
                let s: f64 = v
                    .iter()
                    .zip(w)
                    .zip(&self.rho)
                    .map(|((a, b), r)| (a - b).abs() / r)
                    .sum();
                a2 * (-s).exp()
            }
            KernelFamily::Matern32 => {
                let r2: f64 = v
                    .iter()
                    .zip(w)
                    .zip(&self.rho)
                    .map(|((a, b), r)| {
                        let d = (a - b) / r;
                        d * d
                    })
                    .sum();
                let sr = (3.0 * r2).sqrt();
                a2 * (1.0 + sr) * (-sr).exp()
            }
        }
    }

    /// `k(a_i, b_j)` for all pairs.
    pub fn cross(&self, a: &Covariates, b: &Covariates) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(a.point(i), b.point(j)))
    }

    /// Symmetric `k(a_i, a_j)`, evaluating each pair once.
    pub fn gram(&self, a: &Covariates) -> DMatrix<f64> {
        let n = a.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            k[(j, j)] = self.variance();
            for i in (j + 1)..n {
                let v = self.eval(a.point(i), a.point(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}
