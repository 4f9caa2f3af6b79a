//! Effective settings and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "ION_CALIB_SEED";

/// A required input that does not exist. Reported with exit status 2.
#[derive(Debug)]
pub struct MissingInput {
    pub what: &'static str,
    pub path: PathBuf,
}

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} not found: {}", self.what, self.path.display())
    }
}

impl std::error::Error for MissingInput {}

pub fn require(what: &'static str, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(MissingInput {
            what,
            path: path.to_path_buf(),
        }
        .into());
    }
    Ok(())
}

/// Layers flags over the command's section of the config file over defaults.
/// A seed absent from both flags and config falls back to `ION_CALIB_SEED`.
pub fn resolve<S>(command: &str, flags: &impl Serialize, config: Option<&Value>) -> Result<S>
where
    S: Serialize + DeserializeOwned + Default,
{
    let Value::Object(mut merged) = serde_json::to_value(S::default())? else {
        bail!("settings for `{command}` are not an object");
    };
    let mut seed_given = false;
    if let Some(section) = config.and_then(|c| c.get(command)) {
        let Value::Object(section) = section else {
            bail!("config section `{command}` must be an object");
        };
        overlay(&mut merged, section, command)?;
        seed_given |= section.contains_key("seed");
    }
    if let Value::Object(given) = serde_json::to_value(flags)? {
        seed_given |= given.contains_key("seed");
        overlay(&mut merged, &given, command)?;
    }
    if !seed_given && merged.contains_key("seed") {
        if let Ok(text) = std::env::var(SEED_ENV) {
            let seed: u64 = text
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}=`{text}` is not an unsigned integer"))?;
            merged.insert("seed".into(), seed.into());
        }
    }
    serde_json::from_value(Value::Object(merged)).with_context(|| format!("invalid settings for `{command}`"))
}

fn overlay(base: &mut Map<String, Value>, top: &Map<String, Value>, command: &str) -> Result<()> {
    for (k, v) in top {
        if !base.contains_key(k) {
            bail!("unknown setting `{k}` for `{command}`");
        }
        base.insert(k.clone(), v.clone());
    }
    Ok(())
}

pub fn load_config(path: Option<&Path>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    require("config", path)?;
    let text = std::fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !v.is_object() {
        bail!("config {} must be a JSON object keyed by command", path.display());
    }
    Ok(Some(v))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Value,
    pub config_hash: String,
    pub inputs: BTreeMap<String, InputRecord>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Map::is_empty")]
    pub details: Map<String, Value>,
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        Ok(Self {
            tool: "ion-calib",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: Map::new(),
        })
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sha256 = file_hash(path)?;
        self.inputs.insert(
            role.into(),
            InputRecord {
                path: path.display().to_string(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.details.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Writes `contents` into `dir/name` and records its hash.
    pub fn emit(&mut self, dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.into(), sha256_hex(contents));
        Ok(())
    }

    /// Records a file some other writer already produced in `dir`.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.into(), file_hash(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        sigma: f64,
        iterations: usize,
        seed: u64,
    }

    #[derive(Serialize)]
    struct DemoFlags {
        #[serde(skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    }

    #[test]
    fn flags_beat_config_beat_defaults() {
        let config = serde_json::json!({"demo": {"sigma": 2.0, "iterations": 7, "seed": 3}});
        let s: Demo = resolve("demo", &DemoFlags { sigma: Some(5.0) }, Some(&config)).unwrap();
        assert_eq!(
            s,
            Demo {
                sigma: 5.0,
                iterations: 7,
                seed: 3
            }
        );
        let s: Demo = resolve("demo", &DemoFlags { sigma: None }, Some(&config)).unwrap();
        assert_eq!(s.sigma, 2.0);
        let s: Demo = resolve("other", &DemoFlags { sigma: None }, Some(&config)).unwrap();
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let config = serde_json::json!({"demo": {"sigmaa": 2.0}});
        assert!(resolve::<Demo>("demo", &DemoFlags { sigma: None }, Some(&config)).is_err());
    }

    #[test]
    fn config_hash_is_stable() {
        let a = Manifest::new("demo", &Demo::default()).unwrap();
        let b = Manifest::new("demo", &Demo::default()).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }
}
