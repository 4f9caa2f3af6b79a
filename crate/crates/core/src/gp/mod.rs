//! Gaussian-process discrepancy: kernels, dense and FITC marginal likelihoods,
//! and predictive distributions.

mod dense;
mod fitc;
mod inputs;
mod kernel;
mod snapshot;


use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

pub use dense::{gp_marginal_loglik_dense, DenseGp, MAX_DENSE_POINTS};
pub use fitc::{fitc_covariance, gp_marginal_loglik_fitc, FitcCovariance, FitcGp};
pub use inputs::{GpInputMode, GpInputs, InducingSet, Standardization};
pub use kernel::{Covariates, KernelFamily, KernelSpec};
pub use snapshot::GpSnapshot;

use crate::error::{Error, Result};

/// Relative jitter rungs (times the mean diagonal) tried before giving up.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Negative latent variances beyond this are counted before being clamped.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-10;

static CLAMPED_VARIANCES: AtomicUsize = AtomicUsize::new(0);

/// Process-wide count of predictive variances that came out below
/// `-NEGATIVE_VARIANCE_TOLERANCE` and were clamped to zero.
pub fn clamped_variance_count() -> usize {
    CLAMPED_VARIANCES.load(Ordering::Relaxed)
}

pub(crate) fn clamp_variances(mut var: Vec<f64>) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    for v in var.iter_mut() {
        if *v < 0.0 {
            if *v < -NEGATIVE_VARIANCE_TOLERANCE {
                clamped += 1;
            }
            *v = 0.0;
        }
    }
    if clamped > 0 {
        CLAMPED_VARIANCES.fetch_add(clamped, Ordering::Relaxed);
        log::warn!("clamped {clamped} negative GP predictive variances");
    }
    (var, clamped)
}

/// Cholesky of `m + jitter I`, escalating through [`JITTER_LADDER`].
pub(crate) fn cholesky_jittered(m: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    let diag = m.diagonal();
    let mean_diag = diag.iter().sum::<f64>() / n.max(1) as f64;
    for rel in JITTER_LADDER {
        let jitter = rel * mean_diag;
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(c) = a.cholesky() {
            return Ok((c, jitter));
        }
    }
    let max = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    Err(Error::Numeric(format!(
        "Cholesky failed after jitter {:e}; diagonal range [{min:e}, {max:e}], mean {mean_diag:e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1] * mean_diag
    )))
}

/// Discrepancy mean and latent (noise-free) variance at a set of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    pub mean: Vec<f64>,
    pub latent_var: Vec<f64>,
    /// Entries that were clamped from below `-NEGATIVE_VARIANCE_TOLERANCE`.
    pub clamped: usize,
}

/// How the training covariance is handled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum GpMethod {
    Dense,
    /// FITC with a tensor grid of inducing points, `grid[j]` levels along covariate `j`.
    Fitc {
        grid: Vec<usize>,
    },
}

impl GpMethod {
    /// 256 inducing points in time, or a 16 x 16 grid over (O, V).
    pub fn default_for(mode: GpInputMode) -> Self {
        match mode {
            GpInputMode::TimeOnly => GpMethod::Fitc { grid: vec![256] },
            GpInputMode::OpenVoltage => GpMethod::Fitc { grid: vec![16, 16] },
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Posterior {
    Dense(DenseGp),
    Fitc(FitcGp),
}

/// A GP conditioned on training residuals, with inputs standardized by training statistics.
#[derive(Debug, Clone)]
pub struct TrainedGp {
    pub(crate) mode: GpInputMode,
    pub(crate) standardization: Standardization,
    pub(crate) sigma: f64,
    pub(crate) posterior: Posterior,
}

impl TrainedGp {
    /// `kernel.rho` is interpreted on the standardized scale.
    pub fn fit(
        kernel: &KernelSpec,
        inputs: &GpInputs,
        residual: &[f64],
        sigma: f64,
        method: &GpMethod,
    ) -> Result<Self> {
        if kernel.dim() != inputs.mode.dim() {
            return Err(Error::Contract(format!(
                "kernel has {} length-scales, inputs have {} covariates",
                kernel.dim(),
                inputs.mode.dim()
            )));
        }
        let standardization = Standardization::fit(&inputs.covariates);
        let z = standardization.apply(&inputs.covariates);
        let posterior = match method {
            GpMethod::Dense => Posterior::Dense(DenseGp::fit(kernel, &z, residual, sigma)?),
            GpMethod::Fitc { grid } => {
                let inducing = InducingSet::grid(&z, grid)?;
                Posterior::Fitc(FitcGp::fit(kernel, &z, &inducing, residual, sigma)?)
            }
        };
        Ok(Self {
            mode: inputs.mode,
            standardization,
            sigma,
            posterior,
        })
    }

    pub fn log_likelihood(&self) -> f64 {
        match &self.posterior {
            Posterior::Dense(g) => g.log_likelihood(),
            Posterior::Fitc(g) => g.log_likelihood(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kernel(&self) -> &KernelSpec {
        match &self.posterior {
            Posterior::Dense(g) => &g.kernel,
            Posterior::Fitc(g) => &g.kernel,
        }
    }

    /// Latent prediction in raw covariate units.
    pub fn predict(&self, inputs: &GpInputs) -> Result<GpPrediction> {
        if inputs.mode != self.mode {
            return Err(Error::Contract(
                "prediction inputs use a different covariate mode".into(),
            ));
        }
        let z = self.standardization.apply(&inputs.covariates);
        match &self.posterior {
            Posterior::Dense(g) => g.predict(&z),
            Posterior::Fitc(g) => g.predict(&z),
        }
    }

    /// Discrepancy mean and observation-level variance (latent plus `sigma^2`).
    pub fn predict_observed(&self, inputs: &GpInputs) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.predict(inputs)?;
        let s2 = self.sigma * self.sigma;
        let var = p.latent_var.iter().map(|v| v + s2).collect();
        Ok((p.mean, var))
    }
}
