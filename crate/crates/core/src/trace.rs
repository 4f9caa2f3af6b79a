//! Aligned time / voltage / value series and their CSV form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

const HEADER: [&str; 3] = ["time_ms", "voltage_mV", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Current,
    OpenProbability,
    Residual,
}

impl TraceKind {
    pub fn unit(self) -> &'static str {
        match self {
            TraceKind::Current | TraceKind::Residual => "pA",
            TraceKind::OpenProbability => "1",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Current => "Current",
            TraceKind::OpenProbability => "OpenProbability",
            TraceKind::Residual => "Residual",
        }
    }
}

impl FromStr for TraceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Current" => Ok(TraceKind::Current),
            "OpenProbability" => Ok(TraceKind::OpenProbability),
            "Residual" => Ok(TraceKind::Residual),
            other => Err(Error::Parse {
                field: "kind".into(),
                message: format!("unknown trace kind `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub times: Vec<f64>,
    pub voltages: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: TraceKind,
}

impl Trace {
    pub fn new(times: Vec<f64>, voltages: Vec<f64>, values: Vec<f64>, kind: TraceKind) -> Result<Self> {
        if times.len() != voltages.len() || times.len() != values.len() {
            return Err(Error::Contract(format!(
                "trace fields differ in length ({}, {}, {})",
                times.len(),
                voltages.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Validation("trace times not strictly increasing".into()));
        }
        Ok(Self {
            times,
            voltages,
            values,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 32 + 64);
        let _ = writeln!(out, "# kind={} unit={}", self.kind.as_str(), self.kind.unit());
        out.push_str("time_ms,voltage_mV,value\n");
        for i in 0..self.len() {
            let _ = writeln!(out, "{},{},{}", self.times[i], self.voltages[i], self.values[i]);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses the CSV form. A missing `# kind=` line defaults to `Current`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kind = TraceKind::Current;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            for token in line.trim_start_matches('#').split_whitespace() {
                if let Some(k) = token.strip_prefix("kind=") {
                    kind = k.parse()?;
                }
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        if header != HEADER {
            return Err(Error::Format {
                line: 1,
                message: format!("expected header `time_ms,voltage_mV,value`, got `{}`", header.join(",")),
            });
        }
        let (mut times, mut voltages, mut values) = (Vec::new(), Vec::new(), Vec::new());
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.len() != 3 {
                return Err(Error::Format {
                    line,
                    message: format!("expected 3 fields, found {}", record.len()),
                });
            }
            let parse = |i: usize| -> Result<f64> {
                record[i].parse::<f64>().map_err(|e| Error::Format {
                    line,
                    message: format!("field `{}`: {e}", &record[i]),
                })
            };
            times.push(parse(0)?);
            voltages.push(parse(1)?);
            values.push(parse(2)?);
        }
        Self::new(times, voltages, values, kind)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}
