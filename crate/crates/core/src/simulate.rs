//! Exact integration of `dx/dt = M(V) x` under piecewise-constant voltage.
//!
//! Over each constant-voltage piece the state advances by `exp(M Δ) x`, so the
//! result depends only on where the output grid samples it. Propagators are
//! cached per `(voltage, Δ)` for the duration of one call; uniform output grids
//! therefore cost one exponential per distinct voltage level.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{contract, Error, Result};
use crate::model::{build_markov_matrix, steady_state, ModelSpec, ParameterVector};
use crate::protocol::VoltageProtocol;
use crate::trace::{Trace, TraceKind};

/// Default output spacing in ms.
pub const DEFAULT_DT: f64 = 0.1;

/// Occupancies below this are rounding noise and are clamped to zero on output.
const NEGATIVE_CLAMP: f64 = 1e-10;

/// Largest `max |M_ij| * Δ` handed to the matrix exponential; nalgebra's
/// scaling-and-squaring stalls far beyond it.
pub const MAX_GENERATOR_NORM: f64 = 1e15;

/// Row-major `n_times x n_states` occupancy table.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    n_states: usize,
    data: Vec<f64>,
}

impl StateTrajectory {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.n_states).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_states..(k + 1) * self.n_states]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_states.max(1))
    }
}

/// Quantizes a step length so that grid differences equal up to rounding share a key.
fn step_key(delta: f64) -> u64 {
    delta.to_bits() & !((1u64 << 20) - 1)
}

struct PropagatorCache<'a> {
    spec: &'a ModelSpec,
    params: &'a ParameterVector,
    generators: HashMap<u64, DMatrix<f64>>,
    propagators: HashMap<(u64, u64), Vec<f64>>,
}

impl<'a> PropagatorCache<'a> {
    fn new(spec: &'a ModelSpec, params: &'a ParameterVector) -> Self {
        Self {
            spec,
            params,
            generators: HashMap::new(),
            propagators: HashMap::new(),
        }
    }

    /// Advances `x` in place by `delta` ms at voltage `v`.
    fn advance(&mut self, x: &mut [f64], scratch: &mut [f64], v: f64, delta: f64) -> Result<()> {
        if delta <= 0.0 {
            return Ok(());
        }
        let key = (v.to_bits(), step_key(delta));
        if !self.propagators.contains_key(&key) {
            let m = match self.generators.get(&key.0) {
                Some(m) => m.clone(),
                None => {
                    let m = build_markov_matrix(self.spec, self.params, v)?;
                    self.generators.insert(key.0, m.clone());
                    m
                }
            };
            let scaled = m * delta;
            let norm = scaled.amax();
            if !(norm <= MAX_GENERATOR_NORM) {
                return Err(Error::Numeric(format!(
                    "generator at V={v} scaled by {delta} ms has entries of size {norm:e}"
                )));
            }
            let p = scaled.exp();
            if p.iter().any(|e| !e.is_finite()) {
                return Err(Error::Numeric(format!(
                    "propagator exp(M*{delta}) at V={v} is not finite"
                )));
            }
            let n = p.nrows();
            let mut row_major = vec![0.0; n * n];
            // Generator columns sum to zero, so propagator columns sum to one;
            // restore that where squaring has drifted for stiff generators.
            for j in 0..n {
                let total: f64 = p.column(j).sum();
                for i in 0..n {
                    row_major[i * n + j] = p[(i, j)] / total;
                }
            }
            self.propagators.insert(key, row_major);
        }
        let p = &self.propagators[&key];
        let n = x.len();
        for i in 0..n {
            scratch[i] = p[i * n..(i + 1) * n].iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        }
        x.copy_from_slice(scratch);
        Ok(())
    }
}

fn check_grid(protocol: &VoltageProtocol, grid: &[f64]) -> Result<()> {
    let total = protocol.total_duration();
    let slack = 1e-9 * total.max(1.0);
    if let Some(&first) = grid.first() {
        if first < -slack {
            return Err(Error::Domain(format!("grid starts before 0 ({first})")));
        }
    }
    if let Some(&last) = grid.last() {
        if last > total + slack {
            return Err(Error::Domain(format!(
                "grid ends at {last} ms beyond protocol duration {total}"
            )));
        }
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(contract("time grid must be strictly increasing"));
    }
    Ok(())
}

fn check_simplex(x0: &[f64], n: usize) -> Result<()> {
    if x0.len() != n {
        return Err(contract(format!(
            "initial state has {} entries, model has {n}",
            x0.len()
        )));
    }
    let total: f64 = x0.iter().sum();
    if (total - 1.0).abs() > 1e-8 || x0.iter().any(|&v| v < -1e-12 || !v.is_finite()) {
        return Err(contract(format!("initial state {x0:?} is not a probability vector")));
    }
    Ok(())
}

/// Visits the state at every grid time in order.
fn propagate<F>(
    spec: &ModelSpec,
    params: &ParameterVector,
    protocol: &VoltageProtocol,
    grid: &[f64],
    x0: &[f64],
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, f64, &[f64]) -> Result<()>,
{
    let n = spec.n_states();
    check_simplex(x0, n)?;
    check_grid(protocol, grid)?;
    let segments = protocol.segments();
    let mut cache = PropagatorCache::new(spec, params);
    let mut x = x0.to_vec();
    let mut scratch = vec![0.0; n];
    let mut emitted = vec![0.0; n];
    let mut t_cur = 0.0;
    let mut seg = 0;
    for (k, &t) in grid.iter().enumerate() {
        while seg + 1 < segments.len() && t >= segments[seg].end {
            let s = segments[seg];
            cache.advance(&mut x, &mut scratch, s.voltage, s.end - t_cur)?;
            t_cur = s.end;
            seg += 1;
        }
        cache.advance(&mut x, &mut scratch, segments[seg].voltage, t - t_cur)?;
        t_cur = t_cur.max(t);
        for (e, &v) in emitted.iter_mut().zip(&x) {
            if !v.is_finite() || v < -1e-8 {
                return Err(Error::Numeric(format!("occupancy {v} at t={t} ms")));
            }
            *e = if (-NEGATIVE_CLAMP..0.0).contains(&v) {
                0.0
            } else {
                v.max(0.0)
            };
        }
        visit(k, t, &emitted)?;
    }
    Ok(())
}

/// Occupancy of every state at each grid time, starting from `x0` at t = 0.
pub fn integrate_states(
    spec: &ModelSpec,
    params: &ParameterVector,
    protocol: &VoltageProtocol,
    grid: &[f64],
    x0: &[f64],
) -> Result<StateTrajectory> {
    let n = spec.n_states();
    let mut data = Vec::with_capacity(grid.len() * n);
    propagate(spec, params, protocol, grid, x0, |_, _, x| {
        data.extend_from_slice(x);
        Ok(())
    })?;
    Ok(StateTrajectory { n_states: n, data })
}

/// Steady state at the protocol's first voltage.
pub fn initial_state(spec: &ModelSpec, params: &ParameterVector, protocol: &VoltageProtocol) -> Result<Vec<f64>> {
    steady_state(spec, params, protocol.voltage_at(0.0)?)
}

/// Open probability and clamp voltage on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSeries {
    pub times: Vec<f64>,
    pub voltages: Vec<f64>,
    pub open: Vec<f64>,
}

impl OpenSeries {
    /// `I = g * O * (V - E)` in pA for g in nS and voltages in mV.
    pub fn current(&self, params: &ParameterVector) -> Vec<f64> {
        let g = params.conductance;
        let e = params.reversal;
        self.open
            .iter()
            .zip(&self.voltages)
            .map(|(o, v)| g * o * (v - e))
            .collect()
    }
}

/// Integrates once and returns the open probability and voltage at each grid time.
pub fn simulate_open_series(
    spec: &ModelSpec,
    params: &ParameterVector,
    protocol: &VoltageProtocol,
    grid: &[f64],
    x0: Option<&[f64]>,
) -> Result<OpenSeries> {
    let owned;
    let x0 = match x0 {
        Some(x) => x,
        None => {
            owned = initial_state(spec, params, protocol)?;
            &owned
        }
    };
    let mut open = Vec::with_capacity(grid.len());
    let mut voltages = Vec::with_capacity(grid.len());
    propagate(spec, params, protocol, grid, x0, |_, t, x| {
        open.push(spec.open_probability(x));
        voltages.push(protocol.voltage_at(t)?);
        Ok(())
    })?;
    Ok(OpenSeries {
        times: grid.to_vec(),
        voltages,
        open,
    })
}

/// Macroscopic current at each grid time, from the holding steady state.
pub fn simulate_current(
    spec: &ModelSpec,
    params: &ParameterVector,
    protocol: &VoltageProtocol,
    grid: &[f64],
) -> Result<Trace> {
    let series = simulate_open_series(spec, params, protocol, grid, None)?;
    let current = series.current(params);
    Trace::new(series.times, series.voltages, current, TraceKind::Current)
}

pub fn simulate_open_probability(
    spec: &ModelSpec,
    params: &ParameterVector,
    protocol: &VoltageProtocol,
    grid: &[f64],
) -> Result<Trace> {
    let series = simulate_open_series(spec, params, protocol, grid, None)?;
    Trace::new(series.times, series.voltages, series.open, TraceKind::OpenProbability)
}
