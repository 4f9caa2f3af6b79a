//! (mu/mu_w, lambda)-CMA-ES with box constraints handled by resampling.
//!
//! The search runs in coordinates normalized to the unit box so that one step
//! size suits every dimension.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CmaesSettings {
    /// Start point in natural coordinates; box centre when absent.
    pub initial: Option<Vec<f64>>,
    /// Initial step as a fraction of each bound width (default 0.3).
    pub initial_step: Option<f64>,
    /// Offspring per generation (default `4 + floor(3 ln d)`).
    pub population: Option<usize>,
    pub max_evaluations: usize,
    /// Stop when the step, in normalized units, falls below this.
    pub tol_x: f64,
    /// Stop when the best values of recent generations span less than this.
    pub tol_fun: f64,
    /// Independent restarts with doubled population after convergence.
    pub restarts: usize,
}

impl Default for CmaesSettings {
    fn default() -> Self {
        Self {
            initial: None,
            initial_step: None,
            population: None,
            max_evaluations: 20_000,
            tol_x: 1e-11,
            tol_fun: 1e-12,
            restarts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimumResult {
    pub point: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

pub fn default_population(d: usize) -> usize {
    4 + (3.0 * (d as f64).ln()).floor() as usize
}

/// Maximizes `f` over the box. `-inf` and NaN values rank last.
pub fn cmaes_maximize<F>(f: F, bounds: &[(f64, f64)], settings: &CmaesSettings, seed: u64) -> Result<OptimumResult>
where
    F: Fn(&[f64]) -> f64,
{
    let d = bounds.len();
    if d == 0 {
        return Err(Error::Contract("CMA-ES needs at least one dimension".into()));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Contract(format!("invalid bound [{lo}, {hi}]")));
        }
    }
    let to_natural =
        |z: &DVector<f64>| -> Vec<f64> { z.iter().zip(bounds).map(|(zi, (lo, hi))| lo + zi * (hi - lo)).collect() };
    let start = match &settings.initial {
        Some(x) => {
            if x.len() != d {
                return Err(Error::Contract(format!(
                    "initial point has {} entries, bounds {d}",
                    x.len()
                )));
            }
            DVector::from_iterator(
                d,
                x.iter()
                    .zip(bounds)
                    .map(|(xi, (lo, hi))| ((xi - lo) / (hi - lo)).clamp(0.0, 1.0)),
            )
        }
        None => DVector::from_element(d, 0.5),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = OptimumResult {
        point: to_natural(&start),
        value: f64::NEG_INFINITY,
        evaluations: 0,
    };
    let mut lambda = settings.population.unwrap_or_else(|| default_population(d)).max(2);
    let mut mean = start;
    let mut evaluations = 0;
    for run in 0..=settings.restarts {
        if run > 0 {
            lambda *= 2;
            mean = DVector::from_fn(d, |_, _| {
                use rand::Rng;
                rng.random_range(0.0..1.0)
            });
        }
        let budget = settings.max_evaluations.saturating_sub(evaluations);
        if budget < lambda {
            break;
        }
        let sigma0 = settings.initial_step.unwrap_or(0.3);
        evaluations += run_once(
            &f,
            &to_natural,
            mean.clone(),
            sigma0,
            lambda,
            budget,
            settings,
            &mut rng,
            &mut best,
        );
    }
    best.evaluations = evaluations;
    if !best.value.is_finite() {
        return Err(Error::Optimization(format!(
            "no finite objective value in {evaluations} evaluations"
        )));
    }
    Ok(best)
}

#[allow(clippy::too_many_arguments)]
fn run_once<F, N>(
    f: &F,
    to_natural: &N,
    mut mean: DVector<f64>,
    mut sigma: f64,
    lambda: usize,
    budget: usize,
    settings: &CmaesSettings,
    rng: &mut ChaCha8Rng,
    best: &mut OptimumResult,
) -> usize
where
    F: Fn(&[f64]) -> f64,
    N: Fn(&DVector<f64>) -> Vec<f64>,
{
    let d = mean.len();
    let df = d as f64;
    let mu = lambda / 2;
    let raw: Vec<f64> = (0..mu)
        .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
        .collect();
    let wsum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / wsum).collect();
    let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

    let cc = (4.0 + mueff / df) / (df + 4.0 + 2.0 * mueff / df);
    let cs = (mueff + 2.0) / (df + mueff + 5.0);
    let c1 = 2.0 / ((df + 1.3).powi(2) + mueff);
    let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((df + 2.0).powi(2) + mueff));
    let damps = 1.0 + 2.0 * (((mueff - 1.0) / (df + 1.0)).sqrt() - 1.0).max(0.0) + cs;
    let chi_n = df.sqrt() * (1.0 - 1.0 / (4.0 * df) + 1.0 / (21.0 * df * df));

    let mut pc = DVector::zeros(d);
    let mut ps = DVector::zeros(d);
    let mut b = DMatrix::identity(d, d);
    let mut diag_d = DVector::from_element(d, 1.0);
    let mut c = DMatrix::identity(d, d);
    let mut inv_sqrt_c = DMatrix::identity(d, d);
    let history_len = 10 + (30.0 * df / lambda as f64).ceil() as usize;
    let mut history: Vec<f64> = Vec::new();

    let mut evals = 0;
    let mut generation = 0usize;
    let mut eigen_age = 0usize;
    while evals + lambda <= budget {
        generation += 1;
        let mut offspring: Vec<(DVector<f64>, f64)> = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let mut x = DVector::zeros(d);
            let mut inside = false;
            for _ in 0..100 {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
                let y = &b * diag_d.component_mul(&z);
                x = &mean + sigma * y;
                if x.iter().all(|v| (0.0..=1.0).contains(v)) {
                    inside = true;
                    break;
                }
            }
            if !inside {
                x.apply(|v: &mut f64| *v = v.clamp(0.0, 1.0));
            }
            let natural = to_natural(&x);
            let value = f(&natural);
            let value = if value.is_nan() { f64::NEG_INFINITY } else { value };
            evals += 1;
            if value > best.value {
                best.value = value;
                best.point = natural;
            }
            offspring.push((x, value));
        }
        offspring.sort_by(|a, b| b.1.total_cmp(&a.1));

        let old_mean = mean.clone();
        mean = DVector::zeros(d);
        for (w, (x, _)) in weights.iter().zip(&offspring) {
            mean += *w * x;
        }
        let step = (&mean - &old_mean) / sigma;
        ps = (1.0 - cs) * &ps + (cs * (2.0 - cs) * mueff).sqrt() * (&inv_sqrt_c * &step);
        let ps_norm = ps.norm();
        let hsig = ps_norm / (1.0 - (1.0 - cs).powi(2 * generation as i32)).sqrt() / chi_n < 1.4 + 2.0 / (df + 1.0);
        let hsig_f = if hsig { 1.0 } else { 0.0 };
        pc = (1.0 - cc) * &pc + hsig_f * (cc * (2.0 - cc) * mueff).sqrt() * &step;

        let mut rank_mu = DMatrix::zeros(d, d);
        for (w, (x, _)) in weights.iter().zip(&offspring) {
            let y = (x - &old_mean) / sigma;
            rank_mu += *w * &y * y.transpose();
        }
        c = (1.0 - c1 - cmu) * &c + c1 * (&pc * pc.transpose() + (1.0 - hsig_f) * cc * (2.0 - cc) * &c) + cmu * rank_mu;
        sigma *= ((cs / damps) * (ps_norm / chi_n - 1.0)).exp();
        sigma = sigma.min(1.0);

        eigen_age += lambda;
        if eigen_age as f64 > lambda as f64 / (c1 + cmu) / df / 10.0 {
            eigen_age = 0;
            c = (&c + c.transpose()) * 0.5;
            let eig = SymmetricEigen::new(c.clone());
            b = eig.eigenvectors;
            // Axes longer than the unit box carry no information; cap them so a
            // flat direction cannot starve the others.
            diag_d = eig.eigenvalues.map(|v| v.max(1e-300).sqrt().min(1.0 / sigma));
            c = &b * DMatrix::from_diagonal(&diag_d.map(|v| v * v)) * b.transpose();
            let inv = DMatrix::from_diagonal(&diag_d.map(|v| 1.0 / v));
            inv_sqrt_c = &b * inv * b.transpose();
        }

        history.push(offspring[0].1);
        if history.len() > history_len {
            history.remove(0);
        }
        let max_axis = diag_d.max();
        if sigma * max_axis < settings.tol_x {
            break;
        }
        if history.len() == history_len {
            let hi = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = history.iter().copied().fold(f64::INFINITY, f64::min);
            let current = offspring.first().map(|o| o.1).unwrap_or(f64::NEG_INFINITY);
            let spread = offspring.last().map(|o| current - o.1).unwrap_or(f64::INFINITY);
            if hi.is_finite() && lo.is_finite() && hi - lo < settings.tol_fun && spread < settings.tol_fun {
                break;
            }
        }
        if max_axis / diag_d.min().max(1e-300) > 1e7 {
            break;
        }
    }
    evals
}
