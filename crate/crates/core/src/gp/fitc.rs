//! Fully independent training conditional (FITC) approximation.
//!
//! The training covariance is replaced by `Q + diag(K - Q)` with
//! `Q = K_np K_pp^-1 K_pn`, stored as the factor `V = L_pp^-1 K_pn` (`P x N`) and the
//! diagonal correction. Nothing of size `N x N` is ever formed; likelihood and
//! prediction go through the `P x P` matrix `A = I + V diag(lambda)^-1 V^T`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DMatrixView, DVector};

use super::inputs::InducingSet;
use super::kernel::{Covariates, KernelSpec};
use super::{cholesky_jittered, clamp_variances, GpPrediction};
use crate::error::{Error, Result};

/// Low-rank-plus-diagonal representation of the FITC covariance.
#[derive(Debug, Clone)]
pub struct FitcCovariance {
    pub(crate) kernel: KernelSpec,
    pub(crate) inducing: Covariates,
    /// Lower Cholesky factor of the (jittered) `K_pp`.
    pub(crate) l_pp: DMatrix<f64>,
    /// Jitter that was added to the diagonal of `K_pp`.
    pub(crate) jitter: f64,
    /// `L_pp^-1 K_pn`, so that `Q = V^T V`.
    pub(crate) v: DMatrix<f64>,
    /// `diag(K_nn - Q)`, clamped at zero.
    pub(crate) correction: Vec<f64>,
}

impl FitcCovariance {
    pub fn n_train(&self) -> usize {
        self.v.ncols()
    }

    pub fn n_inducing(&self) -> usize {
        self.v.nrows()
    }

    /// `diag(Q)`.
    pub fn q_diagonal(&self) -> Vec<f64> {
        self.v.column_iter().map(|c| c.norm_squared()).collect()
    }

    pub fn diagonal_correction(&self) -> &[f64] {
        &self.correction
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Materializes `Q + diag(K - Q)`. Test and diagnostic use only; `O(N^2)` memory.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut s = self.v.tr_mul(&self.v);
        let q = self.q_diagonal();
        for i in 0..s.nrows() {
            s[(i, i)] = q[i] + self.correction[i];
        }
        s
    }
}

pub fn fitc_covariance(kernel: &KernelSpec, inputs: &Covariates, inducing: &InducingSet) -> Result<FitcCovariance> {
    if inducing.len() > inputs.len() {
        return Err(Error::Contract(format!(
            "{} inducing points exceed {} training points",
            inducing.len(),
            inputs.len()
        )));
    }
    if inducing.points.dim() != inputs.dim() {
        return Err(Error::Contract("inducing points and inputs differ in width".into()));
    }
    let (chol, jitter) = cholesky_jittered(kernel.gram(&inducing.points))?;
    let l_pp = chol.unpack();
    let mut v = kernel.cross(&inducing.points, inputs);
    if !l_pp.solve_lower_triangular_mut(&mut v) {
        return Err(Error::Numeric("triangular solve against K_pp failed".into()));
    }
    let prior = kernel.variance();
    let correction = v.column_iter().map(|c| (prior - c.norm_squared()).max(0.0)).collect();
    Ok(FitcCovariance {
        kernel: kernel.clone(),
        inducing: inducing.points.clone(),
        l_pp,
        jitter,
        v,
        correction,
    })
}

/// FITC posterior conditioned on a residual vector.
#[derive(Debug, Clone)]
pub struct FitcGp {
    pub(crate) kernel: KernelSpec,
    pub(crate) inducing: Covariates,
    pub(crate) l_pp: DMatrix<f64>,
    /// Lower Cholesky factor of `A`.
    pub(crate) l_a: DMatrix<f64>,
    /// `L_pp^-T A^-1 V lambda^-1 r`: predictive mean weights on `k(x, inducing)`.
    pub(crate) mean_weights: DVector<f64>,
    pub(crate) log_likelihood: f64,
}

impl FitcGp {
    pub fn fit(
        kernel: &KernelSpec,
        inputs: &Covariates,
        inducing: &InducingSet,
        residual: &[f64],
        sigma: f64,
    ) -> Result<Self> {
        let cov = fitc_covariance(kernel, inputs, inducing)?;
        Self::from_covariance(cov, residual, sigma)
    }

    pub fn from_covariance(cov: FitcCovariance, residual: &[f64], sigma: f64) -> Result<Self> {
        let n = cov.n_train();
        let p = cov.n_inducing();
        if residual.len() != n {
            return Err(Error::Contract(format!(
                "{} residuals for {n} training inputs",
                residual.len()
            )));
        }
        let s2 = sigma * sigma;
        let lambda: Vec<f64> = cov.correction.iter().map(|c| c + s2).collect();
        if lambda.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Numeric(
                "FITC diagonal vanished; sigma must be positive when Q reproduces K".into(),
            ));
        }
        let inv_sqrt: Vec<f64> = lambda.iter().map(|l| 1.0 / l.sqrt()).collect();

        let mut scaled = cov.v;
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= inv_sqrt[j];
        }
        // `S S^T` through a transposed view, so no second `P x N` buffer is allocated.
        let scaled_t = DMatrixView::from_slice_with_strides(scaled.as_slice(), n, p, p, 1);
        let mut a = DMatrix::identity(p, p);
        a.gemm(1.0, &scaled, &scaled_t, 1.0);
        let chol_a = a
            .cholesky()
            .ok_or_else(|| Error::Numeric("FITC inner matrix is not positive definite".into()))?;

        let r_scaled = DVector::from_iterator(n, residual.iter().zip(&inv_sqrt).map(|(r, s)| r * s));
        let c = &scaled * &r_scaled;
        let beta = chol_a.solve(&c);

        let log_det_lambda: f64 = lambda.iter().map(|l| l.ln()).sum();
        let l_a = chol_a.unpack();
        let log_det_a = 2.0 * l_a.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = r_scaled.norm_squared() - c.dot(&beta);
        let log_likelihood = -0.5 * (quad + log_det_lambda + log_det_a + n as f64 * (2.0 * PI).ln());

        let mean_weights = cov
            .l_pp
            .tr_solve_lower_triangular(&beta)
            .ok_or_else(|| Error::Numeric("triangular solve against L_pp failed".into()))?;

        Ok(Self {
            kernel: cov.kernel,
            inducing: cov.inducing,
            l_pp: cov.l_pp,
            l_a,
            mean_weights,
            log_likelihood,
        })
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn predict(&self, x: &Covariates) -> Result<GpPrediction> {
        let k_mp = self.kernel.cross(x, &self.inducing);
        let mean = &k_mp * &self.mean_weights;
        let w = self
            .l_pp
            .solve_lower_triangular(&k_mp.transpose())
            .ok_or_else(|| Error::Numeric("triangular solve against L_pp failed".into()))?;
        let u = self
            .l_a
            .solve_lower_triangular(&w)
            .ok_or_else(|| Error::Numeric("triangular solve against L_A failed".into()))?;
        let prior = self.kernel.variance();
        let var: Vec<f64> = w
            .column_iter()
            .zip(u.column_iter())
            .map(|(wc, uc)| prior - wc.norm_squared() + uc.norm_squared())
            .collect();
        let (latent_var, clamped) = clamp_variances(var);
        Ok(GpPrediction {
            mean: mean.iter().copied().collect(),
            latent_var,
            clamped,
        })
    }
}

/// `log N(data; model_mean, Q + diag(K - Q) + sigma^2 I)` in `O(N P^2)`.
pub fn gp_marginal_loglik_fitc(
    kernel: &KernelSpec,
    inputs: &Covariates,
    inducing: &InducingSet,
    sigma: f64,
    data: &[f64],
    model_mean: &[f64],
) -> Result<f64> {
    if data.len() != model_mean.len() {
        return Err(Error::Contract("data and model mean differ in length".into()));
    }
    let r: Vec<f64> = data.iter().zip(model_mean).map(|(y, f)| y - f).collect();
    Ok(FitcGp::fit(kernel, inputs, inducing, &r, sigma)?.log_likelihood())
}
