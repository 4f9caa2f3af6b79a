//! Split potential scale reduction factor.

use super::mcmc::PosteriorSamples;
use crate::error::{Error, Result};

/// Split-R-hat for one scalar across chains of equal length.
///
/// Each chain is halved, giving `2m` sequences of length `n`. When every
/// sequence has zero variance the statistic is 1 if all means agree and
/// infinite otherwise.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Contract(format!(
            "R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::Contract("chains differ in length".into()));
    }
    let n = len / 2;
    if n < 2 {
        return Err(Error::Contract(format!(
            "chains of length {len} are too short to split"
        )));
    }
    let halves: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..n], &c[len - n..]]).collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    let scale = grand.abs().max(1.0);
    if w <= f64::EPSILON * scale * scale {
        return Ok(if b <= f64::EPSILON * scale * scale {
            1.0
        } else {
            f64::INFINITY
        });
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

/// Split-R-hat per parameter, truncating chains to the shortest.
pub fn rhat(chains: &[PosteriorSamples]) -> Result<Vec<f64>> {
    if chains.len() < 2 {
        return Err(Error::Contract(format!(
            "R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let d = chains[0].dim();
    if chains.iter().any(|c| c.dim() != d || c.names != chains[0].names) {
        return Err(Error::Contract("chains disagree on parameter names".into()));
    }
    let len = chains.iter().map(PosteriorSamples::len).min().unwrap_or(0);
    (0..d)
        .map(|j| {
            let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(j)[..len].to_vec()).collect();
            split_rhat(&cols)
        })
        .collect()
}
