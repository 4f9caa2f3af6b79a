//! Voltage-clamp protocols `V(t)`: explicit step sequences or uniformly
//! sampled series held constant between samples.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const STEPS_HEADER: [&str; 2] = ["duration_ms", "voltage_mV"];
const SAMPLED_HEADER: [&str; 2] = ["time_ms", "voltage_mV"];

/// Relative slack when testing whether a time lies inside the protocol.
const TIME_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub duration: f64,
    pub voltage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolShape {
    Steps(Vec<Step>),
    Sampled { dt: f64, voltages: Vec<f64> },
}

/// Interval `[start, end)` of constant voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub voltage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageProtocol {
    shape: ProtocolShape,
    total_duration: f64,
}

impl VoltageProtocol {
    pub fn steps(steps: Vec<Step>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Validation("protocol has no steps".into()));
        }
        for (i, s) in steps.iter().enumerate() {
            if !(s.duration > 0.0) || !s.duration.is_finite() {
                return Err(Error::Validation(format!(
                    "step {i} has non-positive duration {}",
                    s.duration
                )));
            }
            if !s.voltage.is_finite() {
                return Err(Error::Validation(format!("step {i} has non-finite voltage")));
            }
        }
        let total_duration = steps.iter().map(|s| s.duration).sum();
        Ok(Self {
            shape: ProtocolShape::Steps(steps),
            total_duration,
        })
    }

    /// Convenience constructor from `(duration ms, level mV)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::steps(
            pairs
                .iter()
                .map(|&(duration, voltage)| Step { duration, voltage })
                .collect(),
        )
    }

    pub fn sampled(dt: f64, voltages: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Validation(format!("sample spacing {dt} must be positive")));
        }
        if voltages.len() < 2 {
            return Err(Error::Validation("sampled protocol needs at least two samples".into()));
        }
        if voltages.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("sampled protocol has non-finite voltage".into()));
        }
        let total_duration = dt * (voltages.len() - 1) as f64;
        Ok(Self {
            shape: ProtocolShape::Sampled { dt, voltages },
            total_duration,
        })
    }

    pub fn shape(&self) -> &ProtocolShape {
        &self.shape
    }

    pub fn total_duration(&self) -> f64 {
        self.total_duration
    }

    /// Voltage in effect at time `t`; step edges are left-closed.
    pub fn voltage_at(&self, t: f64) -> Result<f64> {
        let slack = TIME_SLACK * self.total_duration.max(1.0);
        if !(t >= -slack && t <= self.total_duration + slack) {
            return Err(Error::Domain(format!(
                "t = {t} ms outside [0, {}]",
                self.total_duration
            )));
        }
        Ok(match &self.shape {
            ProtocolShape::Steps(steps) => {
                let mut start = 0.0;
                for s in steps {
                    let end = start + s.duration;
                    if t < end {
                        return Ok(s.voltage);
                    }
                    start = end;
                }
                steps.last().expect("non-empty").voltage
            }
            ProtocolShape::Sampled { dt, voltages } => voltages[sample_index(t, *dt, voltages.len())],
        })
    }

    /// Times at which `V(t)` may change, including 0 and the total duration.
    pub fn segment_boundaries(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        match &self.shape {
            ProtocolShape::Steps(steps) => {
                let mut t = 0.0;
                for s in steps {
                    t += s.duration;
                    out.push(t);
                }
            }
            ProtocolShape::Sampled { dt, voltages } => {
                out.extend((1..voltages.len()).map(|i| i as f64 * dt));
            }
        }
        out
    }

    /// Constant-voltage pieces covering `[0, total_duration)`.
    pub fn segments(&self) -> Vec<Segment> {
        let bounds = self.segment_boundaries();
        let levels: Vec<f64> = match &self.shape {
            ProtocolShape::Steps(steps) => steps.iter().map(|s| s.voltage).collect(),
            ProtocolShape::Sampled { voltages, .. } => voltages[..voltages.len() - 1].to_vec(),
        };
        bounds
            .windows(2)
            .zip(levels)
            .map(|(w, voltage)| Segment {
                start: w[0],
                end: w[1],
                voltage,
            })
            .collect()
    }

    /// Uniform grid `0, dt, 2 dt, ...` up to and including the end when it lands on it.
    pub fn uniform_grid(&self, dt: f64) -> Result<Vec<f64>> {
        if !(dt > 0.0) {
            return Err(Error::Validation(format!("grid spacing {dt} must be positive")));
        }
        let n = (self.total_duration / dt * (1.0 + 1e-12)).floor() as usize + 1;
        Ok((0..n).map(|i| i as f64 * dt).collect())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let is_steps = header == STEPS_HEADER;
        if !is_steps && header != SAMPLED_HEADER {
            return Err(Error::Format {
                line: 1,
                message: format!(
                    "expected header `duration_ms,voltage_mV` or `time_ms,voltage_mV`, got `{}`",
                    header.join(",")
                ),
            });
        }

        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.len() != 2 {
                return Err(Error::Format {
                    line,
                    message: format!("expected 2 fields, found {}", record.len()),
                });
            }
            let field = |i: usize| -> Result<f64> {
                record[i].parse::<f64>().map_err(|e| Error::Format {
                    line,
                    message: format!("field `{}`: {e}", &record[i]),
                })
            };
            rows.push((line, field(0)?, field(1)?));
        }

        if is_steps {
            for &(line, d, _) in &rows {
                if !(d > 0.0) {
                    return Err(Error::Validation(format!(
                        "line {line}: step duration {d} must be positive"
                    )));
                }
            }
            return Self::from_pairs(&rows.iter().map(|&(_, d, v)| (d, v)).collect::<Vec<_>>());
        }

        if rows.len() < 2 {
            return Err(Error::Validation("sampled protocol needs at least two rows".into()));
        }
        if rows[0].1.abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "line {}: sampled protocol must start at t = 0",
                rows[0].0
            )));
        }
        for w in rows.windows(2) {
            if !(w[1].1 > w[0].1) {
                return Err(Error::Validation(format!(
                    "line {}: time column not strictly increasing",
                    w[1].0
                )));
            }
        }
        let n = rows.len();
        let dt = rows[1].1 - rows[0].1;
        for (i, &(line, t, _)) in rows.iter().enumerate() {
            if (t - i as f64 * dt).abs() > 1e-6 * dt.max(1e-3) {
                return Err(Error::Validation(format!(
                    "line {line}: time grid is not uniform (expected {}, found {t})",
                    i as f64 * dt
                )));
            }
        }
        // Recover dt from the full span to limit accumulated rounding.
        let dt = (rows[n - 1].1 - rows[0].1) / (n - 1) as f64;
        Self::sampled(dt, rows.into_iter().map(|(_, _, v)| v).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.shape {
            ProtocolShape::Steps(steps) => {
                out.push_str("duration_ms,voltage_mV\n");
                for s in steps {
                    let _ = writeln!(out, "{},{}", s.duration, s.voltage);
                }
            }
            ProtocolShape::Sampled { dt, voltages } => {
                out.push_str("time_ms,voltage_mV\n");
                for (i, v) in voltages.iter().enumerate() {
                    let _ = writeln!(out, "{},{}", i as f64 * dt, v);
                }
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn sample_index(t: f64, dt: f64, n: usize) -> usize {
    let i = (t / dt + 1e-9).floor();
    if i <= 0.0 {
        0
    } else {
        (i as usize).min(n - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_step() -> VoltageProtocol {
        VoltageProtocol::from_pairs(&[(1000.0, -80.0), (500.0, 40.0)]).unwrap()
    }

    #[test]
    fn steps_file_total_duration() {
        let p = VoltageProtocol::parse("duration_ms,voltage_mV\n1000,-80\n500,40\n").unwrap();
        assert_eq!(p, two_step());
        assert_eq!(p.total_duration(), 1500.0);
    }

    #[test]
    fn sampled_file_total_duration() {
        let mut text = String::from("time_ms,voltage_mV\n");
        for i in 0..10001 {
            let _ = writeln!(text, "{},{}", i as f64 * 0.1, -80.0);
        }
        let p = VoltageProtocol::parse(&text).unwrap();
        assert!((p.total_duration() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn zero_duration_step_is_rejected() {
        let err = VoltageProtocol::parse("duration_ms,voltage_mV\n0,-80\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = VoltageProtocol::parse("duration_ms,voltage_mV\n100,-80\n50,abc\n").unwrap_err();
        assert!(matches!(err, Error::Format { line: 3, .. }), "{err}");
    }

    #[test]
    fn non_monotone_time_is_rejected() {
        let err = VoltageProtocol::parse("time_ms,voltage_mV\n0,-80\n1,-80\n0.5,0\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn left_closed_step_edges() {
        let p = two_step();
        assert_eq!(p.voltage_at(999.999).unwrap(), -80.0);
        assert_eq!(p.voltage_at(1000.0).unwrap(), 40.0);
        assert_eq!(p.voltage_at(1500.0).unwrap(), 40.0);
        assert!(matches!(p.voltage_at(1500.1), Err(Error::Domain(_))));
        assert!(matches!(p.voltage_at(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_order_hold() {
        let p = VoltageProtocol::sampled(1.0, vec![0.0, 10.0, 20.0]).unwrap();
        assert_eq!(p.voltage_at(1.5).unwrap(), 10.0);
        assert_eq!(p.voltage_at(2.0).unwrap(), 20.0);
        assert_eq!(p.segment_boundaries(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn boundaries() {
        assert_eq!(two_step().segment_boundaries(), vec![0.0, 1000.0, 1500.0]);
        let single = VoltageProtocol::from_pairs(&[(250.0, 0.0)]).unwrap();
        assert_eq!(single.segment_boundaries(), vec![0.0, 250.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_protocol() -> impl Strategy<Value = VoltageProtocol> {
            prop_oneof![
                prop::collection::vec((0.5f64..500.0, -120.0f64..60.0), 1..12)
                    .prop_map(|pairs| VoltageProtocol::from_pairs(&pairs).unwrap()),
                (0.05f64..2.0, prop::collection::vec(-120.0f64..60.0, 2..300))
                    .prop_map(|(dt, v)| VoltageProtocol::sampled(dt, v).unwrap()),
            ]
        }

        proptest! {
            #[test]
            fn constant_between_boundaries(p in arb_protocol(), frac in 0.0f64..1.0) {
                for seg in p.segments() {
                    let t = seg.start + frac * (seg.end - seg.start) * 0.999;
                    prop_assert_eq!(p.voltage_at(t).unwrap(), seg.voltage);
                    prop_assert_eq!(p.voltage_at(seg.start).unwrap(), seg.voltage);
                }
                let b = p.segment_boundaries();
                prop_assert!(b.windows(2).all(|w| w[1] > w[0]));
            }

            #[test]
            fn write_then_load_reproduces_voltages(p in arb_protocol()) {
                let q = VoltageProtocol::parse(&p.to_csv()).unwrap();
                for t in p.segment_boundaries() {
                    prop_assert_eq!(p.voltage_at(t).unwrap(), q.voltage_at(t).unwrap());
                }
            }
        }
    }
}
