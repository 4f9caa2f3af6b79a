//! Prediction metrics and score tables.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::arma::arma_log_likelihood;
use crate::error::{Error, Result};
use crate::inference::{iid_log_likelihood, CalibrationProblem, DiscrepancyParams};
use crate::predict::{conditional_predictive, ArmaMode, Z95};
use crate::trace::Trace;

pub fn rmse(prediction: &[f64], data: &[f64]) -> Result<f64> {
    if prediction.len() != data.len() {
        return Err(Error::Contract(format!(
            "prediction has {} points, data {}",
            prediction.len(),
            data.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::Contract("RMSE of an empty series".into()));
    }
    let ss: f64 = prediction.iter().zip(data).map(|(p, d)| (p - d).powi(2)).sum();
    Ok((ss / data.len() as f64).sqrt())
}

/// `ln((1/K) sum_k exp(l_k))`, stable for widely spread values.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// Monte Carlo estimate of `ln p(Y)` from per-draw log-densities.
pub fn posterior_predictive_loglik(per_draw: &[f64]) -> Result<f64> {
    if per_draw.is_empty() {
        return Err(Error::Contract("no draws to average".into()));
    }
    let v = log_mean_exp(per_draw);
    if v == f64::NEG_INFINITY {
        log::warn!("every draw assigns zero density to the data");
    }
    Ok(v)
}

/// Log-density of `data` (recorded on its own protocol) under one draw.
///
/// IID uses independent Gaussians around the model, ARMA the conditional
/// likelihood of the validation residuals, GP variants independent Gaussians
/// with the observation-level predictive variance.
pub fn predictive_log_density(
    problem: &CalibrationProblem,
    x: &[f64],
    protocol: &crate::protocol::VoltageProtocol,
    data: &Trace,
) -> Result<f64> {
    let point = problem.decode(x)?;
    match &point.discrepancy {
        DiscrepancyParams::Iid { sigma } => {
            let f = problem
                .simulate(&point.params, protocol, &data.times)?
                .current(&point.params);
            let r: Vec<f64> = data.values.iter().zip(&f).map(|(y, m)| y - m).collect();
            Ok(iid_log_likelihood(&r, *sigma))
        }
        DiscrepancyParams::Arma(spec) => {
            let f = problem
                .simulate(&point.params, protocol, &data.times)?
                .current(&point.params);
            let r: Vec<f64> = data.values.iter().zip(&f).map(|(y, m)| y - m).collect();
            arma_log_likelihood(&r, spec)
        }
        DiscrepancyParams::Gp { .. } => {
            let c = conditional_predictive(problem, x, protocol, &data.times, ArmaMode::ZeroMean)?;
            let mean = c.mean();
            Ok(data
                .values
                .iter()
                .zip(&mean)
                .zip(&c.var)
                .map(|((y, m), v)| -0.5 * (2.0 * PI * v).ln() - (y - m).powi(2) / (2.0 * v))
                .sum())
        }
    }
}

/// Posterior-predictive log-likelihood of `data` over `draws`, evaluated in parallel.
/// Draws that fail numerically contribute `-inf`.
pub fn posterior_predictive_score(
    problem: &CalibrationProblem,
    draws: &[Vec<f64>],
    protocol: &crate::protocol::VoltageProtocol,
    data: &Trace,
) -> Result<f64> {
    let per_draw: Vec<f64> = draws
        .par_iter()
        .map(|x| match predictive_log_density(problem, x, protocol, data) {
            Ok(v) if !v.is_nan() => v,
            Ok(_) => f64::NEG_INFINITY,
            Err(e) => {
                log::warn!("predictive density failed for a draw: {e}");
                f64::NEG_INFINITY
            }
        })
        .collect();
    posterior_predictive_loglik(&per_draw)
}

/// Shifts a row so that its best entry is exactly zero.
pub fn relative_scores(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter().map(|v| if *v == max { 0.0 } else { v - max }).collect()
}

/// Rows of per-variant scores, e.g. (protocol, model) against discrepancy variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
    pub footnotes: Vec<String>,
}

impl ScoreTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
            footnotes: Vec::new(),
        }
    }

    pub fn push_row(&mut self, label: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() || values.is_empty() {
            return Err(Error::Contract(format!(
                "row has {} entries for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push((label.into(), values));
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for f in &self.footnotes {
            let _ = writeln!(out, "# {f}");
        }
        let _ = writeln!(out, "row,{}", self.columns.join(","));
        for (label, values) in &self.rows {
            let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{label},{}", cells.join(","));
        }
        out
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|(l, _)| l.len()).chain([3]).max().unwrap_or(3);
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(_, v)| v.iter().map(|x| format!("{x:.3}")).collect())
            .collect();
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| cells.iter().map(|r| r[j].len()).chain([c.len()]).max().unwrap_or(0))
            .collect();
        let mut out = format!("{:label_w$}", "");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for ((label, _), row) in self.rows.iter().zip(&cells) {
            let _ = write!(out, "{label:label_w$}");
            for (c, w) in row.iter().zip(&widths) {
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        }
        for f in &self.footnotes {
            let _ = writeln!(out, "# {f}");
        }
        out
    }
}

/// Each row shifted by its maximum.
pub fn relative_score_table(table: &ScoreTable) -> ScoreTable {
    ScoreTable {
        columns: table.columns.clone(),
        rows: table
            .rows
            .iter()
            .map(|(l, v)| (l.clone(), relative_scores(v)))
            .collect(),
        footnotes: table.footnotes.clone(),
    }
}

/// Footnote attached to tables holding GP log-likelihoods.
pub const FITC_FOOTNOTE: &str =
    "GP log-likelihoods use the same covariance path as calibration; FITC values are approximate";

/// Mechanistic and discrepancy parts of a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub times: Vec<f64>,
    pub voltages: Vec<f64>,
    pub ode_only: Vec<f64>,
    pub discrepancy: Vec<f64>,
    pub combined: Vec<f64>,
    /// `discrepancy +- 1.96 sqrt(var)`.
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
}

impl Decomposition {
    /// `data - ode_only`.
    pub fn residual(&self, data: &[f64]) -> Result<Vec<f64>> {
        if data.len() != self.ode_only.len() {
            return Err(Error::Contract("data length differs from the decomposition".into()));
        }
        Ok(data.iter().zip(&self.ode_only).map(|(y, f)| y - f).collect())
    }

    pub fn to_csv(&self, data: Option<&[f64]>) -> String {
        let mut out = String::from("time_ms,voltage_mV,ode_only_pA,discrepancy_pA,combined_pA,band_lo_pA,band_hi_pA");
        out.push_str(if data.is_some() { ",data_pA,residual_pA\n" } else { "\n" });
        for i in 0..self.times.len() {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                self.times[i],
                self.voltages[i],
                self.ode_only[i],
                self.discrepancy[i],
                self.combined[i],
                self.band_lo[i],
                self.band_hi[i]
            );
            if let Some(d) = data {
                let _ = write!(out, ",{},{}", d[i], d[i] - self.ode_only[i]);
            }
            out.push('\n');
        }
        out
    }
}

pub fn decompose_prediction(
    problem: &CalibrationProblem,
    x: &[f64],
    protocol: &crate::protocol::VoltageProtocol,
    grid: &[f64],
    mode: ArmaMode,
) -> Result<Decomposition> {
    let c = conditional_predictive(problem, x, protocol, grid, mode)?;
    let combined = c.mean();
    let band_lo = c
        .discrepancy_mean
        .iter()
        .zip(&c.var)
        .map(|(d, v)| d - Z95 * v.sqrt())
        .collect();
    let band_hi = c
        .discrepancy_mean
        .iter()
        .zip(&c.var)
        .map(|(d, v)| d + Z95 * v.sqrt())
        .collect();
    Ok(Decomposition {
        times: c.times,
        voltages: c.voltages,
        ode_only: c.model_mean,
        discrepancy: c.discrepancy_mean,
        combined,
        band_lo,
        band_hi,
    })
}
