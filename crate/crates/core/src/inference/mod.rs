//! Priors, log-posterior assembly, CMA-ES mode finding, adaptive MCMC and
//! convergence diagnostics.

mod cmaes;
mod mcmc;
mod prior;
mod problem;
mod rhat;

pub use cmaes::{cmaes_maximize, default_population, CmaesSettings, OptimumResult};
pub use mcmc::{acceptance_probability, laplace_covariance, mcmc_sample, McmcSettings, PosteriorSamples};
pub use prior::{ParameterPrior, Prior, PriorSpec};
pub use problem::{
    default_priors, gp_inputs, iid_log_likelihood, parameter_names, CalibrationProblem, DecodedPoint, Discrepancy,
    DiscrepancyParams, MapEstimate, PriorOptions,
};
pub use rhat::{rhat, split_rhat};
