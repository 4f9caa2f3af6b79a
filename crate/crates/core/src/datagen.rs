//! Synthetic voltage-clamp recordings: ground-truth current plus i.i.d. Gaussian noise.
//!
//! Noise comes from ChaCha8 seeded with a `u64` and mapped to normals with the
//! ziggurat sampler of `rand_distr`, so a `(inputs, seed)` pair always yields the
//! same bytes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParameterVector};
use crate::protocol::VoltageProtocol;
use crate::simulate::simulate_current;
use crate::trace::Trace;

/// Recording noise used in the synthetic experiments, in pA.
pub const DEFAULT_SIGMA: f64 = 25.0;

/// `n` independent `N(0, sigma^2)` draws.
pub fn gaussian_noise(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect()
}

pub fn generate_synthetic_trace(
    spec: &ModelSpec,
    params: &ParameterVector,
    protocol: &VoltageProtocol,
    grid: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<Trace> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Contract(format!("noise level {sigma} must be non-negative")));
    }
    let mut trace = simulate_current(spec, params, protocol, grid)?;
    if sigma > 0.0 {
        let noise = gaussian_noise(trace.len(), sigma, seed);
        for (v, e) in trace.values.iter_mut().zip(noise) {
            *v += e;
        }
    }
    Ok(trace)
}
