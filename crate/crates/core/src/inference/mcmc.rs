//! Adaptive-covariance random-walk Metropolis.
//!
//! After a warm-up the proposal covariance tracks the running chain covariance
//! and a global log-scale factor is tuned towards the target acceptance rate,
//! both with step size `(t - warmup + 1)^-0.6`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub iterations: usize,
    /// Iterations before adaptation starts.
    pub warmup: usize,
    /// Leading iterations discarded from the retained draws.
    pub burn_in: usize,
    /// Upper bound on retained draws; thinning is chosen to respect it.
    pub max_retained: usize,
    pub target_acceptance: f64,
    /// Log a progress line every this many iterations (0 disables).
    pub heartbeat: usize,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            warmup: 1_000,
            burn_in: 50_000,
            max_retained: 10_000,
            target_acceptance: 0.234,
            heartbeat: 10_000,
        }
    }
}

impl McmcSettings {
    pub fn thinning(&self) -> usize {
        let kept = self.iterations.saturating_sub(self.burn_in);
        kept.div_ceil(self.max_retained.max(1)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    /// One row per retained draw.
    pub draws: Vec<Vec<f64>>,
    pub log_posterior: Vec<f64>,
    pub chain_id: usize,
    pub acceptance_rate: f64,
    pub burn_in: usize,
    pub thin: usize,
}

impl PosteriorSamples {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    /// CSV with one column per parameter and a trailing `log_posterior`.
    pub fn to_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push_str(",log_posterior\n");
        for (d, lp) in self.draws.iter().zip(&self.log_posterior) {
            for v in d {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{lp}\n"));
        }
        out
    }

    pub fn parse_csv(text: &str, chain_id: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        if header.last().map(String::as_str) != Some("log_posterior") {
            return Err(Error::Format {
                line: 1,
                message: "samples header must end with `log_posterior`".into(),
            });
        }
        let names = header[..header.len() - 1].to_vec();
        let mut draws = Vec::new();
        let mut log_posterior = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let values: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            let mut values = values.map_err(|e| Error::Format {
                line,
                message: e.to_string(),
            })?;
            if values.len() != header.len() {
                return Err(Error::Format {
                    line,
                    message: format!("expected {} fields, found {}", header.len(), values.len()),
                });
            }
            log_posterior.push(values.pop().expect("non-empty row"));
            draws.push(values);
        }
        Ok(Self {
            names,
            draws,
            log_posterior,
            chain_id,
            acceptance_rate: f64::NAN,
            burn_in: 0,
            thin: 1,
        })
    }
}

/// Runs one chain from `init`. `proposal` is the initial proposal covariance,
/// scaled by `2.38^2 / d`; identity when absent.
pub fn mcmc_sample<F>(
    log_target: F,
    init: &[f64],
    proposal: Option<&DMatrix<f64>>,
    names: Vec<String>,
    settings: &McmcSettings,
    seed: u64,
    chain_id: usize,
) -> Result<PosteriorSamples>
where
    F: Fn(&[f64]) -> f64,
{
    let d = init.len();
    if d == 0 || names.len() != d {
        return Err(Error::Contract(format!(
            "{} names for a {d}-dimensional chain",
            names.len()
        )));
    }
    let mut current = DVector::from_column_slice(init);
    let mut current_lp = log_target(init);
    if !current_lp.is_finite() {
        return Err(Error::Contract(format!(
            "log target at the initial point is {current_lp}"
        )));
    }
    let mut sigma = match proposal {
        Some(m) if m.nrows() == d && m.ncols() == d => m.clone(),
        Some(_) => return Err(Error::Contract("proposal covariance has the wrong shape".into())),
        None => DMatrix::identity(d, d),
    };
    let mut chol =
        factor(&sigma).ok_or_else(|| Error::Contract("proposal covariance is not positive definite".into()))?;
    let mut mu = current.clone();
    let mut log_lambda = (2.38f64 * 2.38 / d as f64).ln();

    let thin = settings.thinning();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::new();
    let mut log_posterior = Vec::new();
    let mut accepted_total = 0usize;
    for t in 0..settings.iterations {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let proposal = &current + log_lambda.exp().sqrt() * (&chol * z);
        let lp = log_target(proposal.as_slice());
        let lp = if lp.is_nan() { f64::NEG_INFINITY } else { lp };
        let log_u: f64 = rng.random::<f64>().ln();
        let accepted = lp > f64::NEG_INFINITY && log_u < lp - current_lp;
        if accepted {
            current = proposal;
            current_lp = lp;
            accepted_total += 1;
        }

        if t >= settings.warmup {
            let gamma = ((t - settings.warmup + 1) as f64).powf(-0.6);
            let diff = &current - &mu;
            mu += gamma * &diff;
            let diff = &current - &mu;
            sigma = (1.0 - gamma) * &sigma + gamma * (&diff * diff.transpose());
            log_lambda += gamma * ((accepted as u8 as f64) - settings.target_acceptance);
            if let Some(c) = factor(&sigma) {
                chol = c;
            }
        }

        if t >= settings.burn_in && (t - settings.burn_in).is_multiple_of(thin) {
            draws.push(current.iter().copied().collect());
            log_posterior.push(current_lp);
        }
        if settings.heartbeat > 0 && (t + 1) % settings.heartbeat == 0 {
            log::info!(
                "chain {chain_id}: iteration {} / {}, acceptance {:.3}, log target {current_lp:.4}",
                t + 1,
                settings.iterations,
                accepted_total as f64 / (t + 1) as f64
            );
        }
    }
    Ok(PosteriorSamples {
        names,
        draws,
        log_posterior,
        chain_id,
        acceptance_rate: accepted_total as f64 / settings.iterations.max(1) as f64,
        burn_in: settings.burn_in,
        thin,
    })
}

fn factor(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().map(|c| c.unpack())
}

/// Metropolis acceptance probability for a symmetric proposal.
pub fn acceptance_probability(current_lp: f64, proposed_lp: f64) -> f64 {
    if proposed_lp == f64::NEG_INFINITY {
        0.0
    } else {
        (proposed_lp - current_lp).exp().min(1.0)
    }
}

/// Inverse of the negative finite-difference Hessian of `f` at `x`, or `None`
/// when that matrix is not positive definite. `steps[j]` is the difference step
/// along coordinate `j`.
pub fn laplace_covariance<F>(f: F, x: &[f64], steps: &[f64]) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let d = x.len();
    let f0 = f(x);
    let eval = |di: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(j, s) in di {
            y[j] += s;
        }
        f(&y)
    };
    let mut h = DMatrix::zeros(d, d);
    for i in 0..d {
        let hi = steps[i];
        let fp = eval(&[(i, hi)]);
        let fm = eval(&[(i, -hi)]);
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let fpp = eval(&[(i, hi), (j, hj)]);
            let fpm = eval(&[(i, hi), (j, -hj)]);
            let fmp = eval(&[(i, -hi), (j, hj)]);
            let fmm = eval(&[(i, -hi), (j, -hj)]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    if !h.iter().all(|v| v.is_finite()) {
        return None;
    }
    let neg = -h;
    let chol = neg.cholesky()?;
    let cov = chol.inverse();
    cov.iter().all(|v| v.is_finite()).then_some(cov)
}
