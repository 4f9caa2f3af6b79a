//! ARMA(p, q) model of correlated residuals: conditional likelihood,
//! innovation-variance estimate and recursive forecasting.
//!
//! Convention: `e_i = sum_j phi_j e_{i-j} + sum_k zeta_k nu_{i-k} + nu_i`.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static REGION_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of coefficient sets passed to [`ArmaSpec::check_region`] that were
/// non-stationary or non-invertible.
pub fn region_violation_count() -> usize {
    REGION_VIOLATIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaSpec {
    pub phi: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Innovation standard deviation in pA.
    pub tau: f64,
}

impl ArmaSpec {
    pub fn new(phi: Vec<f64>, zeta: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Validation(format!("innovation std {tau} must be positive")));
        }
        if phi.iter().chain(&zeta).any(|c| !c.is_finite()) {
            return Err(Error::Validation("ARMA coefficients must be finite".into()));
        }
        Ok(Self { phi, zeta, tau })
    }

    pub fn p(&self) -> usize {
        self.phi.len()
    }

    pub fn q(&self) -> usize {
        self.zeta.len()
    }

    /// All roots of `1 - sum phi_j z^j` lie outside the unit circle.
    pub fn is_stationary(&self) -> bool {
        max_companion_modulus(&self.phi) < 1.0
    }

    /// All roots of `1 + sum zeta_k z^k` lie outside the unit circle.
    pub fn is_invertible(&self) -> bool {
        let neg: Vec<f64> = self.zeta.iter().map(|z| -z).collect();
        max_companion_modulus(&neg) < 1.0
    }

    /// Returns whether the coefficients are stationary and invertible, counting
    /// failures in [`region_violation_count`].
    pub fn check_region(&self) -> bool {
        let ok = self.is_stationary() && self.is_invertible();
        if !ok {
            REGION_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        }
        ok
    }
}

/// Spectral radius of the companion matrix of `z^n - c_1 z^{n-1} - ... - c_n`.
fn max_companion_modulus(c: &[f64]) -> f64 {
    let n = c.len();
    if n == 0 {
        return 0.0;
    }
    let mut m = DMatrix::zeros(n, n);
    for (j, &cj) in c.iter().enumerate() {
        m[(0, j)] = cj;
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Innovations `nu_{p+1..N}` (length `N - p`); innovations before index `p + 1` are zero.
pub fn arma_innovations(residuals: &[f64], spec: &ArmaSpec) -> Result<Vec<f64>> {
    let p = spec.p();
    let n = residuals.len();
    if n <= p {
        return Err(Error::Contract(format!("{n} residuals do not exceed AR order {p}")));
    }
    let mut nu = Vec::with_capacity(n - p);
    for i in p..n {
        let mut v = residuals[i];
        for (j, phi) in spec.phi.iter().enumerate() {
            v -= phi * residuals[i - 1 - j];
        }
        for (k, zeta) in spec.zeta.iter().enumerate() {
            // nu index (i - 1 - k) in residual terms maps to position (i - 1 - k - p) in `nu`.
            if let Some(pos) = (i - p).checked_sub(k + 1) {
                v -= zeta * nu[pos];
            }
        }
        nu.push(v);
    }
    Ok(nu)
}

/// Conditional Gaussian log-likelihood over `nu_{p+1..N}`.
pub fn arma_log_likelihood(residuals: &[f64], spec: &ArmaSpec) -> Result<f64> {
    let nu = arma_innovations(residuals, spec)?;
    let t2 = spec.tau * spec.tau;
    let ss: f64 = nu.iter().map(|v| v * v).sum();
    Ok(-0.5 * nu.len() as f64 * (2.0 * PI * t2).ln() - ss / (2.0 * t2))
}

/// `sum nu^2 / (N - (2p + q + 1))`.
pub fn arma_tau_mle(innovations: &[f64], p: usize, q: usize, n: usize) -> Result<f64> {
    let dof = n as isize - (2 * p + q + 1) as isize;
    if dof <= 0 {
        return Err(Error::Contract(format!(
            "N = {n} leaves no degrees of freedom for ARMA({p},{q})"
        )));
    }
    Ok(innovations.iter().map(|v| v * v).sum::<f64>() / dof as f64)
}

/// Recursive one-step-ahead forecasts over `model_mean.len()` points.
///
/// `last_residuals` and `last_innovations` are chronological (most recent last)
/// and have lengths `p` and `q`. Each forecast residual is fed back as history;
/// future innovations are zero. Every point gets variance `tau^2`.
pub fn arma_forecast(
    model_mean: &[f64],
    last_residuals: &[f64],
    last_innovations: &[f64],
    spec: &ArmaSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (p, q) = (spec.p(), spec.q());
    if last_residuals.len() != p || last_innovations.len() != q {
        return Err(Error::Contract(format!(
            "histories have lengths ({}, {}), expected ({p}, {q})",
            last_residuals.len(),
            last_innovations.len()
        )));
    }
    let mut e_hist: Vec<f64> = last_residuals.to_vec();
    let mut nu_hist: Vec<f64> = last_innovations.to_vec();
    let mut mean = Vec::with_capacity(model_mean.len());
    for &f in model_mean {
        let mut e_hat = 0.0;
        for (j, phi) in spec.phi.iter().enumerate() {
            e_hat += phi * e_hist[e_hist.len() - 1 - j];
        }
        for (k, zeta) in spec.zeta.iter().enumerate() {
            e_hat += zeta * nu_hist[nu_hist.len() - 1 - k];
        }
        mean.push(f + e_hat);
        if p > 0 {
            e_hist.remove(0);
            e_hist.push(e_hat);
        }
        if q > 0 {
            nu_hist.remove(0);
            nu_hist.push(0.0);
        }
    }
    let var = vec![spec.tau * spec.tau; model_mean.len()];
    Ok((mean, var))
}

/// Forecast without conditioning on the calibration residuals: histories are zero.
pub fn arma_forecast_zero_mean(model_mean: &[f64], spec: &ArmaSpec) -> (Vec<f64>, Vec<f64>) {
    arma_forecast(model_mean, &vec![0.0; spec.p()], &vec![0.0; spec.q()], spec)
        .expect("zero histories have the right lengths")
}

/// Conditional maximum-likelihood ARMA fit with `tau` profiled out.
///
/// CMA-ES over `(phi, zeta)` in `[-3, 3]`, started at zero. Returns the coefficients with
/// `tau` set from [`arma_tau_mle`].
pub fn arma_mle(residuals: &[f64], p: usize, q: usize, seed: u64) -> Result<ArmaSpec> {
    let n = residuals.len();
    let d = p + q;
    let profile = |coef: &[f64]| -> Result<(f64, f64)> {
        let spec = ArmaSpec {
            phi: coef[..p].to_vec(),
            zeta: coef[p..].to_vec(),
            tau: 1.0,
        };
        let nu = arma_innovations(residuals, &spec)?;
        let t2 = arma_tau_mle(&nu, p, q, n)?;
        let ss: f64 = nu.iter().map(|v| v * v).sum();
        let m = nu.len() as f64;
        Ok((-0.5 * m * (2.0 * PI * t2).ln() - ss / (2.0 * t2), t2))
    };
    let coef = if d == 0 {
        Vec::new()
    } else {
        let bounds = vec![(-3.0, 3.0); d];
        let objective = |x: &[f64]| match profile(x) {
            Ok((ll, t2)) if ll.is_finite() && t2 > 0.0 => ll,
            _ => f64::NEG_INFINITY,
        };
        let settings = crate::inference::CmaesSettings {
            initial: Some(vec![0.0; d]),
            initial_step: Some(0.05),
            max_evaluations: 4000 * d,
            ..Default::default()
        };
        crate::inference::cmaes_maximize(objective, &bounds, &settings, seed)?.point
    };
    let (_, t2) = profile(&coef)?;
    if !(t2 > 0.0) {
        return Err(Error::Numeric("ARMA innovations vanished; tau is zero".into()));
    }
    ArmaSpec::new(coef[..p].to_vec(), coef[p..].to_vec(), t2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Direct transcription of the recursion with explicit zero-padded arrays
    /// indexed from 1, as an independent check on the indexing.
    fn recursion_oracle(e: &[f64], phi: &[f64], zeta: &[f64]) -> Vec<f64> {
        let (p, q, n) = (phi.len(), zeta.len(), e.len());
        let pad = p + q + 1;
        let mut ee = vec![0.0; n + pad];
        let mut nn = vec![0.0; n + pad];
        ee[pad..].copy_from_slice(e);
        for i in (pad + p)..(pad + n) {
            let ar: f64 = (1..=p).map(|j| phi[j - 1] * ee[i - j]).sum();
            let ma: f64 = (1..=q).map(|k| zeta[k - 1] * nn[i - k]).sum();
            nn[i] = ee[i] - ar - ma;
        }
        nn[(pad + p)..].to_vec()
    }

    fn iid(r: &[f64], s: f64) -> f64 {
        r.iter()
            .map(|e| -0.5 * (2.0 * PI * s * s).ln() - e * e / (2.0 * s * s))
            .sum()
    }

    fn simulate(rng: &mut ChaCha8Rng, phi: &[f64], zeta: &[f64], tau: f64, n: usize) -> Vec<f64> {
        let burn = 200;
        let mut e = vec![0.0; n + burn];
        let mut nu = vec![0.0; n + burn];
        for i in 0..n + burn {
            let z: f64 = rng.sample(StandardNormal);
            nu[i] = tau * z;
            let mut v = nu[i];
            for (j, c) in phi.iter().enumerate() {
                if i > j {
                    v += c * e[i - 1 - j];
                }
            }
            for (k, c) in zeta.iter().enumerate() {
                if i > k {
                    v += c * nu[i - 1 - k];
                }
            }
            e[i] = v;
        }
        e.split_off(burn)
    }

    #[test]
    fn white_noise_innovations_are_residuals() {
        let s = ArmaSpec::new(vec![], vec![], 1.0).unwrap();
        assert_eq!(arma_innovations(&[1.0, -2.0, 3.0], &s).unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn ar1_two_points() {
        let s = ArmaSpec::new(vec![0.5], vec![], 1.0).unwrap();
        assert_eq!(arma_innovations(&[1.0, 0.5], &s).unwrap(), vec![0.0]);
    }

    #[test]
    fn ma1_two_points() {
        let s = ArmaSpec::new(vec![], vec![0.3], 1.0).unwrap();
        let nu = arma_innovations(&[2.0, 1.0], &s).unwrap();
        assert_eq!(nu, recursion_oracle(&[2.0, 1.0], &[], &[0.3]));
        assert!((nu[0] - 2.0).abs() < 1e-15 && (nu[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_residuals_give_normalizer() {
        let s = ArmaSpec::new(vec![], vec![], 2.0).unwrap();
        let ll = arma_log_likelihood(&[0.0; 7], &s).unwrap();
        assert!((ll + 3.5 * (2.0 * PI * 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn arma22_matches_recursion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (phi, zeta) = (vec![0.6, -0.2], vec![0.4, 0.1]);
        let s = ArmaSpec::new(phi.clone(), zeta.clone(), 1.7).unwrap();
        let nu = recursion_oracle(&e, &phi, &zeta);
        let oracle =
            -0.5 * 48.0 * (2.0 * PI * 1.7 * 1.7).ln() - nu.iter().map(|v| v * v).sum::<f64>() / (2.0 * 1.7 * 1.7);
        assert!((arma_log_likelihood(&e, &s).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn tau_mle_examples() {
        assert_eq!(arma_tau_mle(&[1.0; 5], 0, 0, 5).unwrap(), 1.25);
        assert_eq!(arma_tau_mle(&[0.0; 10], 1, 1, 10).unwrap(), 0.0);
        assert!(arma_tau_mle(&[1.0; 5], 2, 0, 5).is_err());
    }

    #[test]
    fn tau_mle_recovers_simulated_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (phi, zeta, tau) = (vec![0.5, -0.3], vec![0.4, 0.2], 2.0);
        let s = ArmaSpec::new(phi.clone(), zeta.clone(), tau).unwrap();
        let mut total = 0.0;
        for _ in 0..50 {
            let e = simulate(&mut rng, &phi, &zeta, tau, 100);
            let nu = arma_innovations(&e, &s).unwrap();
            total += arma_tau_mle(&nu, 2, 2, 100).unwrap();
        }
        let mean = total / 50.0;
        assert!((mean - tau * tau).abs() < 0.2 * tau * tau, "{mean}");
    }

    #[test]
    fn forecast_examples() {
        let f = [1.0, 2.0, 3.0];
        let white = ArmaSpec::new(vec![], vec![], 3.0).unwrap();
        let (m, v) = arma_forecast(&f, &[], &[], &white).unwrap();
        assert_eq!(m, f.to_vec());
        assert_eq!(v, vec![9.0; 3]);

        let ar1 = ArmaSpec::new(vec![0.8], vec![], 1.0).unwrap();
        let (m, _) = arma_forecast(&[0.0; 3], &[10.0], &[], &ar1).unwrap();
        for (a, b) in m.iter().zip([8.0, 6.4, 5.12]) {
            assert!((a - b).abs() < 1e-12);
        }

        let full = ArmaSpec::new(vec![0.7, 0.1], vec![0.5, 0.2], 1.0).unwrap();
        assert_eq!(arma_forecast_zero_mean(&f, &full).0, f.to_vec());
    }

    #[test]
    fn forecast_uses_innovation_history() {
        // MA(1): only the first forecast sees the last innovation.
        let s = ArmaSpec::new(vec![], vec![0.5], 1.0).unwrap();
        let (m, _) = arma_forecast(&[0.0; 3], &[], &[4.0], &s).unwrap();
        assert_eq!(m, vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn history_length_mismatch_is_rejected() {
        let s = ArmaSpec::new(vec![0.5], vec![], 1.0).unwrap();
        assert!(arma_forecast(&[0.0], &[], &[], &s).is_err());
    }

    #[test]
    fn region_checks() {
        assert!(ArmaSpec::new(vec![0.5, 0.3], vec![0.4], 1.0).unwrap().is_stationary());
        assert!(!ArmaSpec::new(vec![1.2], vec![], 1.0).unwrap().is_stationary());
        assert!(!ArmaSpec::new(vec![0.5, 0.6], vec![], 1.0).unwrap().is_stationary());
        assert!(!ArmaSpec::new(vec![], vec![-1.5], 1.0).unwrap().is_invertible());
        let before = region_violation_count();
        assert!(!ArmaSpec::new(vec![1.2], vec![], 1.0).unwrap().check_region());
        assert!(region_violation_count() > before);
    }

    #[test]
    fn mle_recovers_ar_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = simulate(&mut rng, &[0.6, -0.25], &[0.3], 1.5, 4000);
        let fit = arma_mle(&e, 2, 1, 1).unwrap();
        assert!((fit.phi[0] - 0.6).abs() < 0.1, "{fit:?}");
        assert!((fit.phi[1] + 0.25).abs() < 0.1, "{fit:?}");
        assert!((fit.zeta[0] - 0.3).abs() < 0.1, "{fit:?}");
        assert!((fit.tau - 1.5).abs() < 0.1, "{fit:?}");
    }

    proptest! {
        #[test]
        fn white_noise_equals_iid(r in prop::collection::vec(-100.0f64..100.0, 1..200), s in 0.1f64..50.0) {
            let spec = ArmaSpec::new(vec![], vec![], s).unwrap();
            let a = arma_log_likelihood(&r, &spec).unwrap();
            let b = iid(&r, s);
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        #[test]
        fn forecast_is_linear_in_history(
            phi in prop::collection::vec(-0.9f64..0.9, 2),
            zeta in prop::collection::vec(-0.9f64..0.9, 2),
            hist in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            let spec = ArmaSpec::new(phi, zeta, 1.0).unwrap();
            let zero = [0.0; 6];
            let (m1, _) = arma_forecast(&zero, &hist[..2], &hist[2..], &spec).unwrap();
            let doubled: Vec<f64> = hist.iter().map(|h| 2.0 * h).collect();
            let (m2, _) = arma_forecast(&zero, &doubled[..2], &doubled[2..], &spec).unwrap();
            for (a, b) in m1.iter().zip(&m2) {
                prop_assert!((2.0 * a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn likelihood_is_deterministic(r in prop::collection::vec(-10.0f64..10.0, 5..60)) {
            let spec = ArmaSpec::new(vec![0.3, 0.1], vec![0.2, -0.1], 1.3).unwrap();
            let a = arma_log_likelihood(&r, &spec).unwrap();
            let b = arma_log_likelihood(&r, &spec).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
