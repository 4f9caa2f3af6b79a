//! Conditional and posterior-predictive distributions on a new protocol.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arma::{arma_forecast, arma_forecast_zero_mean, arma_innovations};
use crate::error::{Error, Result};
use crate::gp::TrainedGp;
use crate::inference::{gp_inputs, CalibrationProblem, DiscrepancyParams, PosteriorSamples};
use crate::protocol::VoltageProtocol;

/// Quantile of a standard normal used for the 95% band.
pub const Z95: f64 = 1.96;

/// Default number of posterior draws behind a predictive summary.
pub const DEFAULT_PREDICTIVE_DRAWS: usize = 200;

/// How ARMA forecasts treat the calibration residual history.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArmaMode {
    /// Histories are zero, so the discrepancy mean vanishes.
    #[default]
    ZeroMean,
    /// Start from the last calibration residuals and innovations.
    Conditioned,
}

/// Gaussian prediction for one parameter draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPrediction {
    pub times: Vec<f64>,
    pub voltages: Vec<f64>,
    /// Mechanistic current `f(theta, u)`.
    pub model_mean: Vec<f64>,
    /// Discrepancy mean added to the model.
    pub discrepancy_mean: Vec<f64>,
    /// Observation-level predictive variance.
    pub var: Vec<f64>,
    /// Noise-free GP variance, when the variant has one.
    pub latent_var: Option<Vec<f64>>,
}

impl ConditionalPrediction {
    pub fn mean(&self) -> Vec<f64> {
        self.model_mean
            .iter()
            .zip(&self.discrepancy_mean)
            .map(|(f, d)| f + d)
            .collect()
    }
}

/// Predictive mean and variance of the observations at `grid` on `protocol`
/// for the natural-coordinate point `x`. GP variants are conditioned on the
/// calibration residuals at the same point.
pub fn conditional_predictive(
    problem: &CalibrationProblem,
    x: &[f64],
    protocol: &VoltageProtocol,
    grid: &[f64],
    mode: ArmaMode,
) -> Result<ConditionalPrediction> {
    let point = problem.decode(x)?;
    let series = problem.simulate(&point.params, protocol, grid)?;
    let model_mean = series.current(&point.params);
    let n = grid.len();
    let (discrepancy_mean, var, latent_var) = match &point.discrepancy {
        DiscrepancyParams::Iid { sigma } => (vec![0.0; n], vec![sigma * sigma; n], None),
        DiscrepancyParams::Gp {
            sigma,
            kernel,
            mode: gp_mode,
            method,
        } => {
            let (train_series, r) = problem.residuals(&point.params)?;
            let gp = TrainedGp::fit(kernel, &gp_inputs(*gp_mode, &train_series)?, &r, *sigma, method)?;
            let latent = gp.predict(&gp_inputs(*gp_mode, &series)?)?;
            let s2 = sigma * sigma;
            let var = latent.latent_var.iter().map(|v| v + s2).collect();
            (latent.mean, var, Some(latent.latent_var))
        }
        DiscrepancyParams::Arma(spec) => {
            let zeros = vec![0.0; n];
            let (mean, var) = match mode {
                ArmaMode::ZeroMean => arma_forecast_zero_mean(&zeros, spec),
                ArmaMode::Conditioned => {
                    let (_, r) = problem.residuals(&point.params)?;
                    let nu = arma_innovations(&r, spec)?;
                    let last_r = &r[r.len() - spec.p()..];
                    let last_nu = if nu.len() >= spec.q() {
                        nu[nu.len() - spec.q()..].to_vec()
                    } else {
                        let mut padded = vec![0.0; spec.q() - nu.len()];
                        padded.extend_from_slice(&nu);
                        padded
                    };
                    arma_forecast(&zeros, last_r, &last_nu, spec)?
                }
            };
            (mean, var, None)
        }
    };
    Ok(ConditionalPrediction {
        times: series.times,
        voltages: series.voltages,
        model_mean,
        discrepancy_mean,
        var,
        latent_var,
    })
}

/// Moments of the equal-weight mixture of per-draw Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

/// `E = mean of means`, `Var = mean of (var + mean^2) - E^2`, band `E +- 1.96 sqrt(Var)`.
pub fn posterior_predictive_summary(draws: &[(Vec<f64>, Vec<f64>)]) -> Result<PredictiveSummary> {
    let Some((first, _)) = draws.first() else {
        return Err(Error::Contract(
            "posterior predictive summary needs at least one draw".into(),
        ));
    };
    let m = first.len();
    if draws.iter().any(|(mu, v)| mu.len() != m || v.len() != m) {
        return Err(Error::Contract("draws differ in length".into()));
    }
    let k = draws.len() as f64;
    let mut mean = vec![0.0; m];
    for (mu, _) in draws {
        for i in 0..m {
            mean[i] += mu[i];
        }
    }
    mean.iter_mut().for_each(|e| *e /= k);
    // Same moments as the raw-second-moment form, without its cancellation.
    let mut var = vec![0.0; m];
    for (mu, v) in draws {
        for i in 0..m {
            var[i] += v[i] + (mu[i] - mean[i]).powi(2);
        }
    }
    var.iter_mut().for_each(|s| *s /= k);
    let lo95 = mean.iter().zip(&var).map(|(e, v)| e - Z95 * v.sqrt()).collect();
    let hi95 = mean.iter().zip(&var).map(|(e, v)| e + Z95 * v.sqrt()).collect();
    Ok(PredictiveSummary { mean, var, lo95, hi95 })
}

/// Posterior-predictive summary on a protocol plus bookkeeping on failed draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPredictive {
    pub times: Vec<f64>,
    pub voltages: Vec<f64>,
    pub summary: PredictiveSummary,
    /// Empirical 2.5% and 97.5% quantiles of the per-draw predictive means.
    pub mean_q025: Vec<f64>,
    pub mean_q975: Vec<f64>,
    pub draws_used: usize,
    pub draws_dropped: usize,
}

impl PosteriorPredictive {
    /// More than 1% of draws failed.
    pub fn degraded(&self) -> bool {
        let total = self.draws_used + self.draws_dropped;
        total > 0 && self.draws_dropped as f64 > 0.01 * total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_ms,voltage_mV,mean_pA,var_pA2,lo95_pA,hi95_pA\n");
        let s = &self.summary;
        for i in 0..self.times.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.times[i], self.voltages[i], s.mean[i], s.var[i], s.lo95[i], s.hi95[i]
            );
        }
        out
    }

    pub fn quantiles_csv(&self) -> String {
        let mut out = String::from("time_ms,mean_q025_pA,mean_q975_pA\n");
        for i in 0..self.times.len() {
            let _ = writeln!(out, "{},{},{}", self.times[i], self.mean_q025[i], self.mean_q975[i]);
        }
        out
    }
}

/// Conditional predictions for every draw (in parallel), summarized. Draws
/// whose prediction fails are dropped and counted.
pub fn posterior_predictive(
    problem: &CalibrationProblem,
    draws: &[Vec<f64>],
    protocol: &VoltageProtocol,
    grid: &[f64],
    mode: ArmaMode,
) -> Result<PosteriorPredictive> {
    let results: Vec<Result<ConditionalPrediction>> = draws
        .par_iter()
        .map(|x| conditional_predictive(problem, x, protocol, grid, mode))
        .collect();
    let mut kept = Vec::with_capacity(draws.len());
    let mut dropped = 0;
    let mut axes = None;
    for r in results {
        match r {
            Ok(c)
                if c.var
                    .iter()
                    .chain(&c.model_mean)
                    .chain(&c.discrepancy_mean)
                    .all(|v| v.is_finite()) =>
            {
                let mean = c.mean();
                if axes.is_none() {
                    axes = Some((c.times, c.voltages));
                }
                kept.push((mean, c.var));
            }
            Ok(_) => dropped += 1,
            Err(e) => {
                log::warn!("dropping posterior draw: {e}");
                dropped += 1;
            }
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} of {} posterior draws failed to predict", draws.len());
    }
    let summary = posterior_predictive_summary(&kept)?;
    let (times, voltages) = axes.expect("at least one draw was kept");
    let m = times.len();
    let (mut q025, mut q975) = (Vec::with_capacity(m), Vec::with_capacity(m));
    let mut column = Vec::with_capacity(kept.len());
    for i in 0..m {
        column.clear();
        column.extend(kept.iter().map(|(mu, _)| mu[i]));
        column.sort_by(f64::total_cmp);
        q025.push(empirical_quantile(&column, 0.025));
        q975.push(empirical_quantile(&column, 0.975));
    }
    Ok(PosteriorPredictive {
        times,
        voltages,
        summary,
        mean_q025: q025,
        mean_q975: q975,
        draws_used: kept.len(),
        draws_dropped: dropped,
    })
}

/// Linear-interpolated quantile of sorted data.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Up to `n` draws pooled across chains, evenly spaced within the pool.
pub fn select_draws(chains: &[PosteriorSamples], n: usize) -> Vec<Vec<f64>> {
    let pool: Vec<&Vec<f64>> = chains.iter().flat_map(|c| c.draws.iter()).collect();
    if pool.is_empty() || n == 0 {
        return Vec::new();
    }
    let take = n.min(pool.len());
    (0..take).map(|i| pool[i * pool.len() / take].clone()).collect()
}
