//! On-disk form of a trained GP: a JSON header plus a little-endian `f64` blob.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dense::DenseGp;
use super::fitc::FitcGp;
use super::inputs::{GpInputMode, Standardization};
use super::kernel::{Covariates, KernelSpec};
use super::{Posterior, TrainedGp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset in `f64` elements.
    offset: usize,
}

/// JSON header describing a trained GP; matrices live in the sibling blob file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSnapshot {
    pub kernel: KernelSpec,
    pub mode: GpInputMode,
    pub sigma: f64,
    pub standardization: Standardization,
    pub method: String,
    pub log_likelihood: f64,
    pub blob: String,
    matrices: Vec<BlobEntry>,
}

struct BlobWriter {
    entries: Vec<BlobEntry>,
    data: Vec<f64>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, m: &DMatrix<f64>) {
        self.entries.push(BlobEntry {
            name: name.into(),
            rows: m.nrows(),
            cols: m.ncols(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(m.as_slice());
    }
}

fn covariates_matrix(c: &Covariates) -> DMatrix<f64> {
    DMatrix::from_row_slice(c.len(), c.dim(), c.as_slice())
}

fn matrix_covariates(m: &DMatrix<f64>) -> Result<Covariates> {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        data.extend(m.row(i).iter());
    }
    Covariates::new(m.ncols(), data)
}

impl TrainedGp {
    /// Writes `<stem>.json` and `<stem>.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<GpSnapshot> {
        let dir = dir.as_ref();
        let mut blob = BlobWriter {
            entries: Vec::new(),
            data: Vec::new(),
        };
        let method = match &self.posterior {
            Posterior::Dense(g) => {
                blob.push("train", &covariates_matrix(&g.train));
                blob.push("chol_lower", &g.chol_lower);
                blob.push(
                    "weights",
                    &DMatrix::from_column_slice(g.weights.len(), 1, g.weights.as_slice()),
                );
                "dense"
            }
            Posterior::Fitc(g) => {
                blob.push("inducing", &covariates_matrix(&g.inducing));
                blob.push("l_pp", &g.l_pp);
                blob.push("l_a", &g.l_a);
                blob.push(
                    "mean_weights",
                    &DMatrix::from_column_slice(g.mean_weights.len(), 1, g.mean_weights.as_slice()),
                );
                "fitc"
            }
        };
        let blob_name = format!("{stem}.bin");
        let bytes: Vec<u8> = blob.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(&blob_name), bytes)?;
        let snapshot = GpSnapshot {
            kernel: self.kernel().clone(),
            mode: self.mode,
            sigma: self.sigma,
            standardization: self.standardization.clone(),
            method: method.into(),
            log_likelihood: self.log_likelihood(),
            blob: blob_name,
            matrices: blob.entries,
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&snapshot)?,
        )?;
        Ok(snapshot)
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let snapshot: GpSnapshot = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let bytes = std::fs::read(dir.join(&snapshot.blob))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format {
                line: 0,
                message: "GP blob length is not a multiple of 8".into(),
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let get = |name: &str| -> Result<DMatrix<f64>> {
            let e = snapshot
                .matrices
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Parse {
                    field: format!("matrices.{name}"),
                    message: "missing from snapshot".into(),
                })?;
            let end = e.offset + e.rows * e.cols;
            if end > data.len() {
                return Err(Error::Parse {
                    field: format!("matrices.{name}"),
                    message: "extends past the end of the blob".into(),
                });
            }
            Ok(DMatrix::from_column_slice(e.rows, e.cols, &data[e.offset..end]))
        };
        let posterior = match snapshot.method.as_str() {
            "dense" => Posterior::Dense(DenseGp {
                kernel: snapshot.kernel.clone(),
                train: matrix_covariates(&get("train")?)?,
                chol_lower: get("chol_lower")?,
                weights: DVector::from_column_slice(get("weights")?.as_slice()),
                log_likelihood: snapshot.log_likelihood,
            }),
            "fitc" => Posterior::Fitc(FitcGp {
                kernel: snapshot.kernel.clone(),
                inducing: matrix_covariates(&get("inducing")?)?,
                l_pp: get("l_pp")?,
                l_a: get("l_a")?,
                mean_weights: DVector::from_column_slice(get("mean_weights")?.as_slice()),
                log_likelihood: snapshot.log_likelihood,
            }),
            other => {
                return Err(Error::Parse {
                    field: "method".into(),
                    message: format!("unknown GP method `{other}`"),
                })
            }
        };
        Ok(Self {
            mode: snapshot.mode,
            standardization: snapshot.standardization,
            sigma: snapshot.sigma,
            posterior,
        })
    }
}
