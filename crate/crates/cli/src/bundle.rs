//! Self-contained run directories.
//!
//! A fit writes the model, reference parameters, protocol and data it used
//! next to `fit.json`; `sample` copies that set and adds `chain_<k>.csv`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ion_calib::arma::ArmaSpec;
use ion_calib::gp::GpSnapshot;
use ion_calib::inference::{CalibrationProblem, Discrepancy, MapEstimate, PosteriorSamples, PriorSpec};
use ion_calib::{ModelSpec, ParameterVector, Trace, VoltageProtocol};
use serde::{Deserialize, Serialize};

use crate::config::{require, Manifest};

pub const MODEL: &str = "model.json";
pub const PARAMS: &str = "params.json";
pub const PROTOCOL: &str = "protocol.csv";
pub const DATA: &str = "data.csv";
pub const FIT: &str = "fit.json";
pub const GP_STEM: &str = "gp";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub model: String,
    pub discrepancy: Discrepancy,
    pub names: Vec<String>,
    pub priors: PriorSpec,
    pub map: MapEstimate,
    /// Maximum-likelihood ARMA coefficients of the IID residuals, when applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arma_prepass: Option<ArmaSpec>,
}

pub struct Bundle {
    pub dir: PathBuf,
    pub spec: ModelSpec,
    pub reference: ParameterVector,
    pub protocol: VoltageProtocol,
    pub data: Trace,
    pub fit: FitRecord,
}

impl Bundle {
    pub fn load(dir: &Path) -> Result<Self> {
        require("run directory", dir)?;
        let path = |name: &str| dir.join(name);
        for name in [MODEL, PARAMS, PROTOCOL, DATA, FIT] {
            if !path(name).exists() {
                bail!("{} is not a fit or sample output: missing {name}", dir.display());
            }
        }
        let fit: FitRecord = serde_json::from_str(&std::fs::read_to_string(path(FIT))?)
            .with_context(|| format!("parsing {}", path(FIT).display()))?;
        let bundle = Self {
            dir: dir.to_path_buf(),
            spec: ModelSpec::load(path(MODEL))?,
            reference: ParameterVector::load(path(PARAMS))?,
            protocol: VoltageProtocol::load(path(PROTOCOL))?,
            data: Trace::load(path(DATA))?,
            fit,
        };
        bundle.check_snapshot()?;
        Ok(bundle)
    }

    pub fn problem(&self) -> Result<CalibrationProblem> {
        Ok(CalibrationProblem::new(
            self.spec.clone(),
            self.reference.reversal,
            self.protocol.clone(),
            self.data.clone(),
            self.fit.discrepancy.clone(),
            self.fit.priors.clone(),
        )?)
    }

    /// Rejects a GP snapshot that does not belong to the fitted variant.
    fn check_snapshot(&self) -> Result<()> {
        let header = self.dir.join(format!("{GP_STEM}.json"));
        let mode = self.fit.discrepancy.gp_mode();
        if !header.exists() {
            if mode.is_some() {
                bail!("{} holds a GP fit but no GP snapshot", self.dir.display());
            }
            return Ok(());
        }
        let snapshot: GpSnapshot = serde_json::from_str(&std::fs::read_to_string(&header)?)?;
        let kernel = match &self.fit.discrepancy {
            Discrepancy::GpT { kernel, .. } | Discrepancy::GpOv { kernel, .. } => Some(*kernel),
            _ => None,
        };
        if mode != Some(snapshot.mode) || kernel != Some(snapshot.kernel.family) {
            bail!(
                "GP snapshot in {} ({} kernel, {:?} inputs) does not match the `{}` fit",
                self.dir.display(),
                snapshot.kernel.family.as_str(),
                snapshot.mode,
                self.fit.discrepancy.label()
            );
        }
        Ok(())
    }

    /// Fails when a requested variant disagrees with the fitted one.
    pub fn expect_variant(&self, requested: Option<&str>) -> Result<()> {
        match requested {
            Some(label) if label != self.fit.discrepancy.label() => bail!(
                "{} was fitted with the `{}` discrepancy and cannot be used as `{label}`",
                self.dir.display(),
                self.fit.discrepancy.label()
            ),
            _ => Ok(()),
        }
    }

    /// Copies the fit artifacts into `dest` and records them in `manifest`.
    pub fn copy_into(&self, dest: &Path, manifest: &mut Manifest) -> Result<()> {
        let gp_json = format!("{GP_STEM}.json");
        let gp_bin = format!("{GP_STEM}.bin");
        for name in [MODEL, PARAMS, PROTOCOL, DATA, FIT, gp_json.as_str(), gp_bin.as_str()] {
            let src = self.dir.join(name);
            if src.exists() {
                let bytes = std::fs::read(&src)?;
                manifest.emit(dest, name, &bytes)?;
            }
        }
        Ok(())
    }

    /// Chains stored in the directory, in file-name order.
    pub fn chains(&self) -> Result<Vec<PosteriorSamples>> {
        let chains = load_chains(std::slice::from_ref(&self.dir))?;
        if chains.is_empty() {
            bail!(
                "{} holds no chain_*.csv files; run `ion-calib sample` first",
                self.dir.display()
            );
        }
        for c in &chains {
            if c.names != self.fit.names {
                bail!("chains in {} do not match the fitted parameters", self.dir.display());
            }
        }
        Ok(chains)
    }
}

/// Chains from files or from the `chain_*.csv` files of directories.
pub fn load_chains(paths: &[PathBuf]) -> Result<Vec<PosteriorSamples>> {
    let mut files = Vec::new();
    for p in paths {
        require("samples", p)?;
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("chain_") && n.ends_with(".csv"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            PosteriorSamples::parse_csv(&text, i).with_context(|| format!("parsing {}", f.display()))
        })
        .collect()
}
