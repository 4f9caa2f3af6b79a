//! Calibration of Markov ion-channel models against voltage-clamp recordings
//! under several error models: i.i.d. Gaussian noise, Gaussian-process
//! discrepancy in time or in (open probability, voltage), and ARMA residuals.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod arma;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gp;
pub mod inference;
pub mod model;
pub mod predict;
pub mod protocol;
pub mod simulate;
pub mod trace;

pub use error::{Error, Result};
pub use model::{ModelSpec, ParameterVector};
pub use protocol::VoltageProtocol;
pub use trace::{Trace, TraceKind};
