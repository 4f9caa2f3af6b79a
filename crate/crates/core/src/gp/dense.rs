//! Exact GP algebra on the full `N x N` covariance.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::kernel::{Covariates, KernelSpec};
use super::{cholesky_jittered, clamp_variances, GpPrediction};
use crate::error::{Error, Result};

/// Largest training set the dense path will factorize.
pub const MAX_DENSE_POINTS: usize = 5000;

#[derive(Debug, Clone)]
pub struct DenseGp {
    pub(crate) kernel: KernelSpec,
    pub(crate) train: Covariates,
    /// Lower Cholesky factor of `K + sigma^2 I` (jitter included).
    pub(crate) chol_lower: DMatrix<f64>,
    /// `(K + sigma^2 I)^-1 r`.
    pub(crate) weights: DVector<f64>,
    pub(crate) log_likelihood: f64,
}

impl DenseGp {
    pub fn fit(kernel: &KernelSpec, train: &Covariates, residual: &[f64], sigma: f64) -> Result<Self> {
        let n = train.len();
        if residual.len() != n {
            return Err(Error::Contract(format!(
                "{} residuals for {n} training inputs",
                residual.len()
            )));
        }
        if n > MAX_DENSE_POINTS {
            return Err(Error::Contract(format!(
                "dense GP limited to {MAX_DENSE_POINTS} points, got {n}; use the FITC path"
            )));
        }
        let mut k = kernel.gram(train);
        for i in 0..n {
            k[(i, i)] += sigma * sigma;
        }
        let (chol, _) = cholesky_jittered(k)?;
        let r = DVector::from_column_slice(residual);
        let weights = chol.solve(&r);
        let l = chol.unpack();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = r.dot(&weights);
        let log_likelihood = -0.5 * (quad + log_det + n as f64 * (2.0 * PI).ln());
        Ok(Self {
            kernel: kernel.clone(),
            train: train.clone(),
            chol_lower: l,
            weights,
            log_likelihood,
        })
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Discrepancy mean and latent variance at `x`.
    pub fn predict(&self, x: &Covariates) -> Result<GpPrediction> {
        let k_mn = self.kernel.cross(x, &self.train);
        let mean = &k_mn * &self.weights;
        let w = self
            .chol_lower
            .solve_lower_triangular(&k_mn.transpose())
            .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
        let prior = self.kernel.variance();
        let var: Vec<f64> = w.column_iter().map(|c| prior - c.norm_squared()).collect();
        let (latent_var, clamped) = clamp_variances(var);
        Ok(GpPrediction {
            mean: mean.iter().copied().collect(),
            latent_var,
            clamped,
        })
    }
}

/// `log N(data; model_mean, K + sigma^2 I)`.
pub fn gp_marginal_loglik_dense(
    kernel: &KernelSpec,
    inputs: &Covariates,
    sigma: f64,
    data: &[f64],
    model_mean: &[f64],
) -> Result<f64> {
    if data.len() != model_mean.len() {
        return Err(Error::Contract("data and model mean differ in length".into()));
    }
    let r: Vec<f64> = data.iter().zip(model_mean).map(|(y, f)| y - f).collect();
    Ok(DenseGp::fit(kernel, inputs, &r, sigma)?.log_likelihood())
}
