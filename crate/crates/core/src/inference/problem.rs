//! Log-posterior of a calibration problem: mechanistic model, error model,
//! recorded trace and priors.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cmaes::{cmaes_maximize, CmaesSettings};
use super::mcmc::{laplace_covariance, mcmc_sample, McmcSettings, PosteriorSamples};
use super::prior::{ParameterPrior, Prior, PriorSpec};
use crate::arma::{arma_log_likelihood, arma_mle, ArmaSpec};
use crate::error::{Error, Result};
use crate::gp::{GpInputMode, GpInputs, GpMethod, KernelFamily, KernelSpec, TrainedGp};
use crate::model::{ModelSpec, ParameterVector};
use crate::protocol::VoltageProtocol;
use crate::simulate::{simulate_open_series, OpenSeries};
use crate::trace::Trace;

/// Error model attached to the mechanistic prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum Discrepancy {
    /// Independent Gaussian noise; `sigma` is sampled unless fixed.
    Iid { fixed_sigma: Option<f64> },
    /// GP discrepancy over time.
    GpT { kernel: KernelFamily, method: GpMethod },
    /// GP discrepancy over (open probability, voltage).
    GpOv { kernel: KernelFamily, method: GpMethod },
    /// ARMA residuals with innovation std held at `tau`.
    Arma { p: usize, q: usize, tau: f64 },
}

impl Discrepancy {
    pub fn label(&self) -> &'static str {
        match self {
            Discrepancy::Iid { .. } => "iid",
            Discrepancy::GpT { .. } => "gp-t",
            Discrepancy::GpOv { .. } => "gp-ov",
            Discrepancy::Arma { .. } => "arma",
        }
    }

    pub fn gp_default(mode: GpInputMode, kernel: KernelFamily) -> Self {
        let method = GpMethod::default_for(mode);
        match mode {
            GpInputMode::TimeOnly => Discrepancy::GpT { kernel, method },
            GpInputMode::OpenVoltage => Discrepancy::GpOv { kernel, method },
        }
    }

    pub fn gp_mode(&self) -> Option<GpInputMode> {
        match self {
            Discrepancy::GpT { .. } => Some(GpInputMode::TimeOnly),
            Discrepancy::GpOv { .. } => Some(GpInputMode::OpenVoltage),
            _ => None,
        }
    }

    pub fn parameter_names(&self) -> Vec<String> {
        match self {
            Discrepancy::Iid { fixed_sigma: Some(_) } => vec![],
            Discrepancy::Iid { fixed_sigma: None } => vec!["sigma".into()],
            Discrepancy::GpT { .. } => vec!["sigma".into(), "alpha".into(), "rho_t".into()],
            Discrepancy::GpOv { .. } => vec!["sigma".into(), "alpha".into(), "rho_O".into(), "rho_V".into()],
            Discrepancy::Arma { p, q, .. } => (1..=*p)
                .map(|j| format!("phi{j}"))
                .chain((1..=*q).map(|k| format!("zeta{k}")))
                .collect(),
        }
    }
}

/// Discrepancy parameters decoded from a point.
#[derive(Debug, Clone, PartialEq)]
pub enum DiscrepancyParams {
    Iid {
        sigma: f64,
    },
    Gp {
        sigma: f64,
        kernel: KernelSpec,
        mode: GpInputMode,
        method: GpMethod,
    },
    Arma(ArmaSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPoint {
    pub params: ParameterVector,
    pub discrepancy: DiscrepancyParams,
}

/// Parameter names: `p1..pK`, `g`, then the discrepancy parameters.
pub fn parameter_names(spec: &ModelSpec, discrepancy: &Discrepancy) -> Vec<String> {
    (1..=spec.n_kinetic_params())
        .map(|i| format!("p{i}"))
        .chain(std::iter::once("g".to_string()))
        .chain(discrepancy.parameter_names())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorOptions {
    /// Uniform box on kinetics and `g` spans `reference / box_factor ..= reference * box_factor`.
    pub box_factor: f64,
    pub sigma_scale: f64,
    pub inverse_gamma: (f64, f64),
    pub arma_scale: f64,
}

impl Default for PriorOptions {
    fn default() -> Self {
        Self {
            box_factor: 10.0,
            sigma_scale: 25.0,
            inverse_gamma: (5.0, 5.0),
            arma_scale: 2.5,
        }
    }
}

/// Uniform box around `reference` for the mechanistic parameters,
/// HalfNormal on `sigma`, InverseGamma on `alpha` and `rho`, and Normal priors
/// centred on `arma_center` for ARMA coefficients.
pub fn default_priors(
    spec: &ModelSpec,
    reference: &ParameterVector,
    discrepancy: &Discrepancy,
    arma_center: Option<&ArmaSpec>,
    options: &PriorOptions,
) -> Result<PriorSpec> {
    reference.validate(spec)?;
    let f = options.box_factor;
    if !(f > 1.0) {
        return Err(Error::Validation(format!("box factor {f} must exceed 1")));
    }
    let names = parameter_names(spec, discrepancy);
    let mut out = Vec::with_capacity(names.len());
    let mechanistic = reference.kinetics.iter().chain(std::iter::once(&reference.conductance));
    for (name, &v) in names.iter().zip(mechanistic) {
        if !(v > 0.0) {
            return Err(Error::Validation(format!(
                "reference value {v} for `{name}` must be positive to build a log-scale box"
            )));
        }
        out.push(ParameterPrior::uniform(name.clone(), v / f, v * f, true)?);
    }
    let (shape, scale) = options.inverse_gamma;
    let sigma = || {
        ParameterPrior::new(
            "sigma",
            Prior::HalfNormal {
                scale: options.sigma_scale,
            },
            true,
            (1e-2, 1e3),
        )
    };
    match discrepancy {
        Discrepancy::Iid { fixed_sigma: Some(_) } => {}
        Discrepancy::Iid { fixed_sigma: None } => out.push(sigma()?),
        Discrepancy::GpT { .. } | Discrepancy::GpOv { .. } => {
            out.push(sigma()?);
            out.push(ParameterPrior::new(
                "alpha",
                Prior::InverseGamma { shape, scale },
                true,
                (1e-2, 1e4),
            )?);
            for name in &names[out.len()..] {
                out.push(ParameterPrior::new(
                    name.clone(),
                    Prior::InverseGamma { shape, scale },
                    true,
                    (1e-2, 1e2),
                )?);
            }
        }
        Discrepancy::Arma { p, q, .. } => {
            let center =
                arma_center.ok_or_else(|| Error::Contract("ARMA priors need a maximum-likelihood centre".into()))?;
            if center.p() != *p || center.q() != *q {
                return Err(Error::Contract("ARMA centre has the wrong order".into()));
            }
            for (name, &c) in names[out.len()..]
                .to_vec()
                .iter()
                .zip(center.phi.iter().chain(&center.zeta))
            {
                out.push(ParameterPrior::new(
                    name.clone(),
                    Prior::Normal {
                        center: c,
                        scale: options.arma_scale,
                    },
                    false,
                    (-3.0, 3.0),
                )?);
            }
        }
    }
    Ok(PriorSpec::new(out))
}

/// Maximum a-posteriori estimate in natural coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEstimate {
    pub point: Vec<f64>,
    pub log_posterior: f64,
    pub evaluations: usize,
}

/// Everything needed to evaluate `log p(theta, phi | data)`.
#[derive(Debug)]
pub struct CalibrationProblem {
    spec: ModelSpec,
    reversal: f64,
    protocol: VoltageProtocol,
    data: Trace,
    discrepancy: Discrepancy,
    priors: PriorSpec,
    simulations: AtomicUsize,
}

impl CalibrationProblem {
    pub fn new(
        spec: ModelSpec,
        reversal: f64,
        protocol: VoltageProtocol,
        data: Trace,
        discrepancy: Discrepancy,
        priors: PriorSpec,
    ) -> Result<Self> {
        let names = parameter_names(&spec, &discrepancy);
        if priors.dim() != names.len() {
            return Err(Error::Contract(format!(
                "{} priors for {} parameters ({})",
                priors.dim(),
                names.len(),
                names.join(", ")
            )));
        }
        if data.is_empty() {
            return Err(Error::Contract("calibration trace is empty".into()));
        }
        if let Discrepancy::Arma { p, q, tau } = &discrepancy {
            if !(*tau > 0.0) {
                return Err(Error::Validation(format!("ARMA tau {tau} must be positive")));
            }
            if data.len() <= 2 * p + q + 1 {
                return Err(Error::Contract("trace too short for the ARMA order".into()));
            }
        }
        if let Discrepancy::Iid { fixed_sigma: Some(s) } = &discrepancy {
            if !(*s > 0.0) {
                return Err(Error::Validation(format!("fixed sigma {s} must be positive")));
            }
        }
        Ok(Self {
            spec,
            reversal,
            protocol,
            data,
            discrepancy,
            priors,
            simulations: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn reversal(&self) -> f64 {
        self.reversal
    }

    pub fn protocol(&self) -> &VoltageProtocol {
        &self.protocol
    }

    pub fn data(&self) -> &Trace {
        &self.data
    }

    pub fn discrepancy(&self) -> &Discrepancy {
        &self.discrepancy
    }

    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn dim(&self) -> usize {
        self.priors.dim()
    }

    pub fn names(&self) -> Vec<String> {
        parameter_names(&self.spec, &self.discrepancy)
    }

    /// Number of forward simulations run so far.
    pub fn simulation_count(&self) -> usize {
        self.simulations.load(Ordering::Relaxed)
    }

    pub fn decode(&self, x: &[f64]) -> Result<DecodedPoint> {
        if x.len() != self.dim() {
            return Err(Error::Contract(format!(
                "point has {} entries, expected {}",
                x.len(),
                self.dim()
            )));
        }
        let k = self.spec.n_kinetic_params();
        let params = ParameterVector::new(x[..k].to_vec(), x[k], self.reversal);
        let rest = &x[k + 1..];
        let discrepancy = match &self.discrepancy {
            Discrepancy::Iid { fixed_sigma } => DiscrepancyParams::Iid {
                sigma: fixed_sigma.unwrap_or_else(|| rest[0]),
            },
            Discrepancy::GpT { kernel, method } | Discrepancy::GpOv { kernel, method } => DiscrepancyParams::Gp {
                sigma: rest[0],
                kernel: KernelSpec::new(*kernel, rest[1], rest[2..].to_vec())?,
                mode: self.discrepancy.gp_mode().expect("GP variant"),
                method: method.clone(),
            },
            Discrepancy::Arma { p, tau, .. } => {
                DiscrepancyParams::Arma(ArmaSpec::new(rest[..*p].to_vec(), rest[*p..].to_vec(), *tau)?)
            }
        };
        Ok(DecodedPoint { params, discrepancy })
    }

    /// Forward simulation on an arbitrary protocol and grid.
    pub fn simulate(&self, params: &ParameterVector, protocol: &VoltageProtocol, grid: &[f64]) -> Result<OpenSeries> {
        self.simulations.fetch_add(1, Ordering::Relaxed);
        simulate_open_series(&self.spec, params, protocol, grid, None)
    }

    /// Simulated series on the calibration grid and the residual `data - current`.
    pub fn residuals(&self, params: &ParameterVector) -> Result<(OpenSeries, Vec<f64>)> {
        let series = self.simulate(params, &self.protocol, &self.data.times)?;
        let current = series.current(params);
        let r = self.data.values.iter().zip(&current).map(|(y, f)| y - f).collect();
        Ok((series, r))
    }

    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let point = self.decode(x)?;
        let (series, r) = self.residuals(&point.params)?;
        match &point.discrepancy {
            DiscrepancyParams::Iid { sigma } => Ok(iid_log_likelihood(&r, *sigma)),
            DiscrepancyParams::Gp {
                sigma,
                kernel,
                mode,
                method,
            } => {
                let inputs = gp_inputs(*mode, &series)?;
                Ok(TrainedGp::fit(kernel, &inputs, &r, *sigma, method)?.log_likelihood())
            }
            DiscrepancyParams::Arma(spec) => {
                spec.check_region();
                arma_log_likelihood(&r, spec)
            }
        }
    }

    /// Log posterior in natural coordinates; `-inf` outside the prior support
    /// (without simulating) and on any numeric failure.
    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let lp = self.priors.log_prior(x);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        match self.log_likelihood(x) {
            Ok(ll) if !ll.is_nan() => lp + ll,
            Ok(_) => {
                log::debug!("likelihood is NaN at {x:?}");
                f64::NEG_INFINITY
            }
            Err(e) => {
                log::debug!("likelihood failed at {x:?}: {e}");
                f64::NEG_INFINITY
            }
        }
    }

    /// Density of the sampling coordinates `u`, including the log-scale Jacobian.
    pub fn log_posterior_sampling(&self, u: &[f64]) -> f64 {
        self.log_posterior(&self.priors.to_natural(u)) + self.priors.log_jacobian(u)
    }

    /// CMA-ES on the posterior mode, searching in sampling coordinates.
    pub fn fit_map(&self, initial: Option<&[f64]>, settings: &CmaesSettings, seed: u64) -> Result<MapEstimate> {
        let bounds = self.priors.sampling_bounds();
        let mut settings = settings.clone();
        if let Some(x0) = initial {
            if x0.len() != self.dim() {
                return Err(Error::Contract("initial point has the wrong dimension".into()));
            }
            settings.initial = Some(self.priors.to_sampling(x0));
        }
        let r = cmaes_maximize(
            |u| self.log_posterior(&self.priors.to_natural(u)),
            &bounds,
            &settings,
            seed,
        )?;
        Ok(MapEstimate {
            point: self.priors.to_natural(&r.point),
            log_posterior: r.value,
            evaluations: r.evaluations,
        })
    }

    /// Laplace approximation of the sampling-coordinate covariance at `x`,
    /// falling back to a diagonal built from the search box.
    pub fn proposal_covariance(&self, x: &[f64]) -> DMatrix<f64> {
        let u = self.priors.to_sampling(x);
        let bounds = self.priors.sampling_bounds();
        let steps: Vec<f64> = bounds.iter().map(|(lo, hi)| 1e-4 * (hi - lo)).collect();
        laplace_covariance(|v| self.log_posterior_sampling(v), &u, &steps).unwrap_or_else(|| {
            log::warn!("Laplace covariance unavailable; using a diagonal proposal");
            let diag: Vec<f64> = bounds.iter().map(|(lo, hi)| (1e-3 * (hi - lo)).powi(2)).collect();
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag))
        })
    }

    /// Runs one adaptive chain from `init` (natural units); draws are returned in natural units.
    pub fn sample(
        &self,
        init: &[f64],
        proposal: Option<&DMatrix<f64>>,
        settings: &McmcSettings,
        seed: u64,
        chain_id: usize,
    ) -> Result<PosteriorSamples> {
        let u0 = self.priors.to_sampling(init);
        let mut s = mcmc_sample(
            |u| self.log_posterior_sampling(u),
            &u0,
            proposal,
            self.names(),
            settings,
            seed,
            chain_id,
        )?;
        for (d, lp) in s.draws.iter_mut().zip(s.log_posterior.iter_mut()) {
            *lp -= self.priors.log_jacobian(d);
            *d = self.priors.to_natural(d);
        }
        Ok(s)
    }

    /// Independent chains in parallel, each started from a Laplace-scale
    /// perturbation of `center`. `jobs` bounds the worker threads.
    pub fn sample_chains(
        &self,
        center: &[f64],
        settings: &McmcSettings,
        seeds: &[u64],
        jobs: usize,
    ) -> Result<Vec<PosteriorSamples>> {
        let cov = self.proposal_covariance(center);
        let chol = cov.clone().cholesky().map(|c| c.unpack());
        let u_center = self.priors.to_sampling(center);
        let starts: Vec<Vec<f64>> = seeds
            .iter()
            .map(|&seed| {
                let Some(l) = &chol else { return center.to_vec() };
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_c4a1);
                for _ in 0..100 {
                    let z = nalgebra::DVector::from_fn(center.len(), |_, _| StandardNormal.sample(&mut rng));
                    let u: Vec<f64> = (nalgebra::DVector::from_column_slice(&u_center) + l * z)
                        .iter()
                        .copied()
                        .collect();
                    if self.log_posterior_sampling(&u).is_finite() {
                        return self.priors.to_natural(&u);
                    }
                }
                center.to_vec()
            })
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
        pool.install(|| {
            starts
                .par_iter()
                .zip(seeds.par_iter())
                .enumerate()
                .map(|(i, (x0, &seed))| self.sample(x0, Some(&cov), settings, seed, i))
                .collect()
        })
    }

    /// ARMA maximum-likelihood coefficients of the residuals at `x`.
    pub fn arma_prepass(&self, x: &[f64], p: usize, q: usize, seed: u64) -> Result<ArmaSpec> {
        let point = self.decode(x)?;
        let (_, r) = self.residuals(&point.params)?;
        arma_mle(&r, p, q, seed)
    }
}

pub fn iid_log_likelihood(residuals: &[f64], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    -0.5 * residuals.len() as f64 * (2.0 * PI * s2).ln() - ss / (2.0 * s2)
}

/// GP covariates for a simulated series.
pub fn gp_inputs(mode: GpInputMode, series: &OpenSeries) -> Result<GpInputs> {
    match mode {
        GpInputMode::TimeOnly => GpInputs::time_only(&series.times),
        GpInputMode::OpenVoltage => GpInputs::open_voltage(&series.open, &series.voltages),
    }
}
