//! Time-series types, charge/SOC bookkeeping, synthetic excitation and
//! noise generation, and the CSV record format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::standard_normals;

/// Uniformly sampled real time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSignal {
    values: Vec<f64>,
    ts: f64,
}

impl SampledSignal {
    pub fn new(values: Vec<f64>, ts: f64) -> Result<Self> {
        if !(ts > 0.0) || !ts.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sampling period must be positive and finite, got {ts}"
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample at index {bad}"
            )));
        }
        Ok(Self { values, ts })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same sampling period, new samples.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.ts)
    }
}

/// Capacity bookkeeping; `soc` is maintained from `q_d` by construction.
#[derive(Debug, Clone, Copy)]
pub struct ChargeState {
    q_max: f64,
    q_d: f64,
    soc: f64,
}

impl ChargeState {
    pub fn new(q_max: f64, q_d: f64) -> Result<Self> {
        if !(q_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell capacity must be positive, got {q_max}"
            )));
        }
        Ok(Self {
            q_max,
            q_d,
            soc: (1.0 - q_d / q_max) * 100.0,
        })
    }

    pub fn q_max(&self) -> f64 {
        self.q_max
    }

    pub fn q_d(&self) -> f64 {
        self.q_d
    }

    pub fn soc(&self) -> f64 {
        self.soc
    }
}

/// A current/voltage discharge record with common sampling period.
#[derive(Debug, Clone)]
pub struct DischargeRecord {
    pub current: SampledSignal,
    pub voltage: SampledSignal,
    /// True generating parameters for synthetic data, as (name, value) pairs.
    pub meta: Option<Vec<(String, f64)>>,
}

impl DischargeRecord {
    pub fn new(current: SampledSignal, voltage: SampledSignal) -> Result<Self> {
        if current.len() != voltage.len() {
            return Err(Error::InvalidArgument(format!(
                "current has {} samples, voltage has {}",
                current.len(),
                voltage.len()
            )));
        }
        if current.ts() != voltage.ts() {
            return Err(Error::InvalidArgument(
                "current and voltage sampling periods differ".into(),
            ));
        }
        Ok(Self {
            current,
            voltage,
            meta: None,
        })
    }

    pub fn ts(&self) -> f64 {
        self.current.ts()
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }
}

/// Per-segment sample counts N_i.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    lengths: Vec<usize>,
}

impl SegmentPlan {
    /// `min_len` is the smallest admissible segment (the number of unknowns
    /// of the model it will be used with); `record_len` bounds the total.
    pub fn new(lengths: Vec<usize>, min_len: usize, record_len: usize) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::InvalidArgument("empty segment plan".into()));
        }
        if let Some(&n) = lengths.iter().find(|&&n| n < min_len) {
            return Err(Error::InvalidArgument(format!(
                "segment of {n} samples is below the minimum of {min_len}"
            )));
        }
        let total: usize = lengths.iter().sum();
        if total > record_len {
            return Err(Error::InvalidArgument(format!(
                "segment plan covers {total} samples but the record has {record_len}"
            )));
        }
        Ok(Self { lengths })
    }

    pub fn single(record_len: usize) -> Self {
        Self {
            lengths: vec![record_len],
        }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// (start, length) of each segment.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.lengths.len());
        let mut start = 0;
        for &n in &self.lengths {
            out.push((start, n));
            start += n;
        }
        out
    }
}

/// q_d[0] = q0, q_d[k+1] = q_d[k] + ts * i[k]. Output in coulombs.
pub fn integrate_charge(current: &SampledSignal, q0: f64) -> SampledSignal {
    let ts = current.ts();
    let mut out = Vec::with_capacity(current.len());
    let mut q = q0;
    for &i in current.values() {
        out.push(q);
        q += ts * i;
    }
    SampledSignal { values: out, ts }
}

/// SOC in percent, (1 - q_d / q_max) * 100.
pub fn soc_from_charge(q_d: f64, q_max: f64) -> Result<f64> {
    if !(q_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "q_max must be positive, got {q_max}"
        )));
    }
    Ok((1.0 - q_d / q_max) * 100.0)
}

/// Removed charge corresponding to an initial SOC.
pub fn initial_charge(soc0: f64, q_max: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&soc0) {
        return Err(Error::InvalidArgument(format!(
            "SOC must be in [0, 100], got {soc0}"
        )));
    }
    if !(q_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "q_max must be positive, got {q_max}"
        )));
    }
    Ok((1.0 - soc0 / 100.0) * q_max)
}

/// Periodic rectangular discharge current, starting in the ON phase.
pub fn pulse_train(
    amplitude: f64,
    on_s: f64,
    off_s: f64,
    total_s: f64,
    ts: f64,
) -> Result<SampledSignal> {
    for (name, v) in [("on", on_s), ("off", off_s), ("total", total_s), ("ts", ts)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} duration must be positive, got {v}"
            )));
        }
    }
    let on = (on_s / ts).round() as usize;
    let off = (off_s / ts).round() as usize;
    if (on as f64 - on_s / ts).abs() > 1.0 || (off as f64 - off_s / ts).abs() > 1.0 {
        return Err(Error::InvalidArgument(
            "ts must divide the on/off durations to within one sample".into(),
        ));
    }
    let n = (total_s / ts).round() as usize;
    let period = on + off;
    let values = (0..n)
        .map(|k| if k % period < on { amplitude } else { 0.0 })
        .collect();
    SampledSignal::new(values, ts)
}

/// Adds zero-mean Gaussian noise with sigma = peak-to-peak / 10^(snr/20).
///
/// Noise is drawn from ChaCha12 seeded with `seed` through the Box-Muller
/// transform, so a fixed seed reproduces bit-identical output everywhere.
pub fn add_noise(signal: &SampledSignal, snr_db: f64, seed: u64) -> Result<SampledSignal> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(
            "snr must be finite; omit the noise option for a clean signal".into(),
        ));
    }
    let (min, max) = signal
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let pkpk = max - min;
    if !(pkpk > 0.0) {
        return Err(Error::InvalidArgument(
            "constant signal has zero peak-to-peak; finite SNR is undefined".into(),
        ));
    }
    let sigma = pkpk / 10f64.powf(snr_db / 20.0);
    let noise = standard_normals(seed, signal.len());
    let values = signal
        .values()
        .iter()
        .zip(noise)
        .map(|(&v, z)| v + sigma * z)
        .collect();
    signal.with_values(values)
}

const CSV_HEADER: &str = "t,i_bat,v_bat";

/// Writes the record as CSV with header `t,i_bat,v_bat`.
///
/// Values are printed with Rust's shortest round-trip formatting, so a
/// read-back is lossless.
pub fn write_record(record: &DischargeRecord, path: &Path) -> Result<()> {
    let ts = record.ts();
    let mut out = String::with_capacity(record.len() * 32 + 16);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (k, (&i, &v)) in record
        .current
        .values()
        .iter()
        .zip(record.voltage.values())
        .enumerate()
    {
        writeln!(out, "{},{},{}", k as f64 * ts, i, v).expect("string write");
    }
    std::fs::write(path, out).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a CSV record, inferring and checking the sampling period.
pub fn read_record(path: &Path) -> Result<DischargeRecord> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::CsvParse {
        line: 1,
        message: "empty file".into(),
    })?;
    if header.trim() != CSV_HEADER {
        return Err(Error::CsvParse {
            line: 1,
            message: format!("expected header `{CSV_HEADER}`, got `{header}`"),
        });
    }
    let mut t = Vec::new();
    let mut current = Vec::new();
    let mut voltage = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::CsvParse {
                line: idx + 1,
                message: format!("expected 3 columns, got {}", fields.len()),
            });
        }
        let mut parsed = [0.0; 3];
        for (slot, field) in parsed.iter_mut().zip(&fields) {
            *slot = field.parse::<f64>().map_err(|e| Error::CsvParse {
                line: idx + 1,
                message: format!("`{field}`: {e}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::CsvParse {
                    line: idx + 1,
                    message: format!("non-finite entry `{field}`"),
                });
            }
        }
        t.push(parsed[0]);
        current.push(parsed[1]);
        voltage.push(parsed[2]);
    }
    if t.len() < 2 {
        return Err(Error::CsvParse {
            line: t.len() + 1,
            message: "need at least two data rows to infer the sampling period".into(),
        });
    }
    let ts = t[1] - t[0];
    if !(ts > 0.0) {
        return Err(Error::CsvParse {
            line: 3,
            message: format!("non-increasing timestamps (inferred ts = {ts})"),
        });
    }
    for k in 1..t.len() {
        let dt = t[k] - t[k - 1];
        if (dt - ts).abs() > 1e-9 * ts.max(t[k].abs()) {
            return Err(Error::CsvParse {
                line: k + 2,
                message: format!("non-uniform time step: {dt} vs {ts}"),
            });
        }
    }
    DischargeRecord::new(
        SampledSignal::new(current, ts)?,
        SampledSignal::new(voltage, ts)?,
    )
}
