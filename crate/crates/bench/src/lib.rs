//! Shared fixtures for the criterion benches.

use std::path::PathBuf;

use ion_calib::{ModelSpec, ParameterVector, VoltageProtocol};

pub fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Model definition and generating parameters by stem, e.g. `model_a`.
pub fn model(stem: &str) -> (ModelSpec, ParameterVector) {
    let spec = ModelSpec::load(repo(&format!("models/{stem}.json"))).expect("model file");
    let params = ParameterVector::load(repo(&format!("params/{stem}.json"))).expect("params file");
    (spec, params)
}

pub fn protocol(stem: &str) -> VoltageProtocol {
    VoltageProtocol::load(repo(&format!("protocols/{stem}.csv"))).expect("protocol file")
}

/// Smooth deterministic residual-like signal for GP benches.
pub fn wiggle(times: &[f64]) -> Vec<f64> {
    times.iter().map(|t| 3.0 * (t / 37.0).sin() + (t / 5.3).cos()).collect()
}
