use serde::{Deserialize, Serialize};

use super::kernel::Covariates;
use crate::error::{Error, Result};

/// Which quantities the discrepancy is a function of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpInputMode {
    /// Time only (q = 1).
    TimeOnly,
    /// Open probability and voltage (q = 2).
    OpenVoltage,
}

impl GpInputMode {
    pub fn dim(self) -> usize {
        match self {
            GpInputMode::TimeOnly => 1,
            GpInputMode::OpenVoltage => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpInputs {
    pub mode: GpInputMode,
    pub covariates: Covariates,
}

impl GpInputs {
    pub fn time_only(times: &[f64]) -> Result<Self> {
        Ok(Self {
            mode: GpInputMode::TimeOnly,
            covariates: Covariates::from_columns(&[times])?,
        })
    }

    pub fn open_voltage(open: &[f64], voltages: &[f64]) -> Result<Self> {
        Ok(Self {
            mode: GpInputMode::OpenVoltage,
            covariates: Covariates::from_columns(&[open, voltages])?,
        })
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }
}

/// Per-column shift and scale to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Statistics of `x`; constant columns get unit scale.
    pub fn fit(x: &Covariates) -> Self {
        let n = x.len().max(1) as f64;
        let dim = x.dim();
        let mut mean = vec![0.0; dim];
        for p in x.points() {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for p in x.points() {
            for j in 0..dim {
                var[j] += (p[j] - mean[j]).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &Covariates) -> Covariates {
        let dim = x.dim();
        let mut data = x.as_slice().to_vec();
        for row in data.chunks_exact_mut(dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Covariates::new(dim, data).expect("same shape")
    }
}

/// Pseudo-inputs summarizing the training covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    pub points: Covariates,
}

impl InducingSet {
    pub fn new(points: Covariates, n_train: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("inducing set is empty".into()));
        }
        if points.len() > n_train {
            return Err(Error::Contract(format!(
                "{} inducing points exceed {n_train} training points",
                points.len()
            )));
        }
        Ok(Self { points })
    }

    /// Tensor grid with `counts[j]` evenly spaced levels spanning column `j` of `x`.
    /// The total is capped at the number of training points.
    pub fn grid(x: &Covariates, counts: &[usize]) -> Result<Self> {
        if counts.len() != x.dim() || counts.contains(&0) {
            return Err(Error::Contract(format!(
                "grid counts {counts:?} do not match covariate width {}",
                x.dim()
            )));
        }
        let axes: Vec<Vec<f64>> = (0..x.dim())
            .map(|j| {
                let col = x.column(j);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let c = counts[j];
                if c == 1 || hi <= lo {
                    vec![0.5 * (lo + hi)]
                } else {
                    (0..c).map(|i| lo + (hi - lo) * i as f64 / (c - 1) as f64).collect()
                }
            })
            .collect();
        let mut data = Vec::new();
        let mut idx = vec![0usize; axes.len()];
        'outer: loop {
            data.extend(idx.iter().zip(&axes).map(|(&i, a)| a[i]));
            for d in (0..axes.len()).rev() {
                idx[d] += 1;
                if idx[d] < axes[d].len() {
                    continue 'outer;
                }
                idx[d] = 0;
            }
            break;
        }
        let mut points = Covariates::new(x.dim(), data)?;
        if points.len() > x.len() {
            points = x.clone();
        }
        Self::new(points, x.len())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_columns_have_unit_moments() {
        let x = Covariates::from_columns(&[&[0.0, 1.0, 2.0, 3.0], &[5.0, 5.0, 5.0, 5.0]]).unwrap();
        let s = Standardization::fit(&x);
        let z = s.apply(&x);
        let c0 = z.column(0);
        assert!(c0.iter().sum::<f64>().abs() < 1e-12);
        assert!((c0.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert_eq!(z.column(1), vec![0.0; 4]);
    }

    #[test]
    fn grid_spans_the_range() {
        let x = Covariates::from_columns(&[&[0.0, 0.5, 1.0, 0.2, 0.9, 0.1], &[-1.0, 1.0, 0.0, 0.3, 0.2, 0.1]]).unwrap();
        let g = InducingSet::grid(&x, &[2, 3]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.points.point(0), &[0.0, -1.0]);
        assert_eq!(g.points.point(5), &[1.0, 1.0]);
    }

    #[test]
    fn more_inducing_than_training_rejected() {
        let x = Covariates::from_columns(&[&[0.0, 1.0]]).unwrap();
        assert!(InducingSet::new(Covariates::from_columns(&[&[0.0, 0.5, 1.0]]).unwrap(), x.len()).is_err());
    }
}
