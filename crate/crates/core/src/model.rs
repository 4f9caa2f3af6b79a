//! Markov channel topologies described as data.
//!
//! A model document lists named states, directed edges carrying a rate law
//! `k(V) = A exp(s B V)` that indexes into a shared kinetic parameter vector,
//! and the set of conducting states. The engine never hard-codes a topology:
//! the shipped models under `models/` are plain documents.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Largest `|B V|` accepted by [`transition_rate`] before reporting overflow.
pub const MAX_RATE_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    name: String,
    states: Vec<String>,
    #[serde(default)]
    edges: Vec<EdgeDocument>,
    open: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDocument {
    from: String,
    to: String,
    rate: RateDocument,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateDocument {
    a_index: usize,
    b_index: usize,
    #[serde(default = "positive_sign")]
    b_sign: i8,
}

fn positive_sign() -> i8 {
    1
}

/// Rate law of one edge: `k(V) = kinetics[a_index] * exp(b_sign * kinetics[b_index] * V)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateLaw {
    pub a_index: usize,
    pub b_index: usize,
    pub b_sign: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub rate: RateLaw,
}

/// A validated channel topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    name: String,
    states: Vec<String>,
    edges: Vec<Edge>,
    open_states: Vec<usize>,
    n_kinetic_params: usize,
}

fn schema_error(err: serde_json::Error) -> Error {
    let message = err.to_string();
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "<document>".to_owned());
    Error::Parse { field, message }
}

impl ModelSpec {
    /// Parses and validates a JSON model document.
    pub fn parse(document: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(document).map_err(schema_error)?;
        Self::from_document(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.states.is_empty() {
            return Err(Error::Validation("model declares no states".into()));
        }
        let mut index = BTreeMap::new();
        for (i, s) in doc.states.iter().enumerate() {
            if index.insert(s.as_str(), i).is_some() {
                return Err(Error::Validation(format!("state `{s}` declared twice")));
            }
        }
        let lookup = |name: &str, field: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Validation(format!("{field} names undeclared state `{name}`")))
        };

        let mut edges = Vec::with_capacity(doc.edges.len());
        for (k, e) in doc.edges.iter().enumerate() {
            let from = lookup(&e.from, &format!("edges[{k}].from"))?;
            let to = lookup(&e.to, &format!("edges[{k}].to"))?;
            if from == to {
                return Err(Error::Validation(format!("edges[{k}] is a self-loop")));
            }
            let b_sign = match e.rate.b_sign {
                1 => 1.0,
                -1 => -1.0,
                other => {
                    return Err(Error::Parse {
                        field: format!("edges[{k}].rate.b_sign"),
                        message: format!("expected 1 or -1, got {other}"),
                    })
                }
            };
            edges.push(Edge {
                from,
                to,
                rate: RateLaw {
                    a_index: e.rate.a_index,
                    b_index: e.rate.b_index,
                    b_sign,
                },
            });
        }

        if doc.open.is_empty() {
            return Err(Error::Validation("open state set is empty".into()));
        }
        let mut open_states = Vec::new();
        for s in &doc.open {
            let i = lookup(s, "open")?;
            if !open_states.contains(&i) {
                open_states.push(i);
            }
        }

        let n_kinetic_params = validate_rate_indices(&edges)?;
        check_connected(doc.states.len(), &edges)?;

        Ok(Self {
            name: doc.name,
            states: doc.states,
            edges,
            open_states,
            n_kinetic_params,
        })
    }

    /// Serializes back into the JSON document format.
    pub fn to_document(&self) -> String {
        let doc = ModelDocument {
            name: self.name.clone(),
            states: self.states.clone(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDocument {
                    from: self.states[e.from].clone(),
                    to: self.states[e.to].clone(),
                    rate: RateDocument {
                        a_index: e.rate.a_index,
                        b_index: e.rate.b_index,
                        b_sign: if e.rate.b_sign < 0.0 { -1 } else { 1 },
                    },
                })
                .collect(),
            open: self.open_states.iter().map(|&i| self.states[i].clone()).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("model document serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn open_states(&self) -> &[usize] {
        &self.open_states
    }

    pub fn n_kinetic_params(&self) -> usize {
        self.n_kinetic_params
    }

    /// Indices into the kinetic vector that act as pre-exponential factors.
    pub fn a_indices(&self) -> BTreeSet<usize> {
        self.edges.iter().map(|e| e.rate.a_index).collect()
    }

    /// Sum of occupancies over the conducting states.
    pub fn open_probability(&self, x: &[f64]) -> f64 {
        self.open_states.iter().map(|&i| x[i]).sum()
    }
}

/// Each distinct `a_index` must always pair with the same `b_index`, no index may
/// play both roles, and indices must cover `0..n` without gaps.
fn validate_rate_indices(edges: &[Edge]) -> Result<usize> {
    let mut pairs: BTreeMap<usize, usize> = BTreeMap::new();
    let mut b_owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, e) in edges.iter().enumerate() {
        let RateLaw { a_index, b_index, .. } = e.rate;
        if a_index == b_index {
            return Err(Error::Validation(format!(
                "edges[{k}] uses index {a_index} for both A and B"
            )));
        }
        if let Some(&prev) = pairs.get(&a_index) {
            if prev != b_index {
                return Err(Error::Validation(format!(
                    "edges[{k}]: a_index {a_index} paired with b_index {b_index}, previously {prev}"
                )));
            }
        }
        if let Some(&prev) = b_owner.get(&b_index) {
            if prev != a_index {
                return Err(Error::Validation(format!(
                    "edges[{k}]: b_index {b_index} shared by a_index {a_index} and {prev}"
                )));
            }
        }
        pairs.insert(a_index, b_index);
        b_owner.insert(b_index, a_index);
    }
    let mut used = BTreeSet::new();
    for (&a, &b) in &pairs {
        if b_owner.contains_key(&a) || pairs.contains_key(&b) {
            return Err(Error::Validation(format!(
                "kinetic index used both as A and as B ({a}, {b})"
            )));
        }
        used.insert(a);
        used.insert(b);
    }
    let n = used.len();
    if used.iter().copied().ne(0..n) {
        return Err(Error::Validation(format!(
            "kinetic indices must be contiguous from 0, got {used:?}"
        )));
    }
    debug_assert_eq!(n, 2 * pairs.len());
    Ok(n)
}

fn check_connected(n_states: usize, edges: &[Edge]) -> Result<()> {
    let mut adjacency = vec![Vec::new(); n_states];
    for e in edges {
        adjacency[e.from].push(e.to);
        adjacency[e.to].push(e.from);
    }
    let mut seen = vec![false; n_states];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(s) = queue.pop_front() {
        for &t in &adjacency[s] {
            if !seen[t] {
                seen[t] = true;
                queue.push_back(t);
            }
        }
    }
    if seen.iter().all(|&s| s) {
        Ok(())
    } else {
        Err(Error::Validation("edge graph is disconnected".into()))
    }
}

/// Kinetic parameters plus conductance (nS) and reversal potential (mV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub kinetics: Vec<f64>,
    #[serde(rename = "conductance_nS")]
    pub conductance: f64,
    #[serde(rename = "reversal_mV")]
    pub reversal: f64,
}

impl ParameterVector {
    pub fn new(kinetics: Vec<f64>, conductance: f64, reversal: f64) -> Self {
        Self {
            kinetics,
            conductance,
            reversal,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(schema_error)
    }

    /// Checks lengths against `spec`, positivity of every A and `g >= 0`.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.kinetics.len() != spec.n_kinetic_params() {
            return Err(contract(format!(
                "model `{}` needs {} kinetic parameters, got {}",
                spec.name(),
                spec.n_kinetic_params(),
                self.kinetics.len()
            )));
        }
        for a in spec.a_indices() {
            let v = self.kinetics[a];
            if !(v > 0.0) {
                return Err(Error::Validation(format!(
                    "pre-exponential factor kinetics[{a}] = {v} must be positive"
                )));
            }
        }
        if !(self.conductance >= 0.0) {
            return Err(Error::Validation(format!(
                "conductance {} must be non-negative",
                self.conductance
            )));
        }
        Ok(())
    }
}

/// `A exp(B V)` with an explicit overflow check.
pub fn transition_rate(a: f64, b: f64, v: f64) -> Result<f64> {
    let exponent = b * v;
    if !exponent.is_finite() || exponent.abs() > MAX_RATE_EXPONENT {
        return Err(Error::RateOverflow { a, b, v });
    }
    let k = a * exponent.exp();
    if !k.is_finite() {
        return Err(Error::RateOverflow { a, b, v });
    }
    Ok(k)
}

/// Generator `M` such that `dx/dt = M x`; column `i` holds the outflow of state `i`.
pub fn build_markov_matrix(spec: &ModelSpec, params: &ParameterVector, voltage: f64) -> Result<DMatrix<f64>> {
    if params.kinetics.len() != spec.n_kinetic_params() {
        return Err(contract(format!(
            "expected {} kinetic parameters, got {}",
            spec.n_kinetic_params(),
            params.kinetics.len()
        )));
    }
    let n = spec.n_states();
    let mut m = DMatrix::zeros(n, n);
    for e in spec.edges() {
        let a = params.kinetics[e.rate.a_index];
        let b = e.rate.b_sign * params.kinetics[e.rate.b_index];
        let k = transition_rate(a, b, voltage)?;
        m[(e.to, e.from)] += k;
        m[(e.from, e.from)] -= k;
    }
    Ok(m)
}

/// Stationary occupancy at a fixed voltage.
pub fn steady_state(spec: &ModelSpec, params: &ParameterVector, voltage: f64) -> Result<Vec<f64>> {
    let m = build_markov_matrix(spec, params, voltage)?;
    let n = m.nrows();
    // Replace the last balance equation by the normalization constraint.
    let mut a = m.clone();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let lu = a.full_piv_lu();
    if !lu.is_invertible() {
        return Err(Error::Numeric(format!(
            "steady state at V={voltage} is not unique (reducible chain)"
        )));
    }
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("steady-state solve failed".into()))?;
    if x.iter().any(|v| !v.is_finite() || *v < -1e-9) {
        return Err(Error::Numeric(format!(
            "steady state at V={voltage} has invalid entries {:?}",
            x.as_slice()
        )));
    }
    let mut x: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= total);
    Ok(x)
}
