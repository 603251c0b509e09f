//! Append-only metric log: one JSON object per line, UTF-8, `\n` terminated,
//! fields in declaration order. Non-finite floats are written as the strings
//! `"NaN"`, `"inf"` and `"-inf"` so diverged runs stay readable.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sa::{DiversityStatus, SignSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub layer: String,
    #[serde(with = "log_float")]
    pub sa_mean: f64,
    #[serde(with = "log_float")]
    pub sa_frac_positive: f64,
    #[serde(with = "log_float")]
    pub sa_frac_negative: f64,
    /// q05, q25, q50, q75, q95.
    pub sa_quantiles: [f64; 5],
    #[serde(with = "log_float")]
    pub weight_sigma1: f64,
    #[serde(with = "log_float_opt")]
    pub grad_sigma1: Option<f64>,
    #[serde(with = "log_float")]
    pub stable_rank: f64,
    #[serde(with = "log_float")]
    pub max_activation: f64,
    #[serde(with = "log_float")]
    pub pathology_median: f64,
    pub verdict: DiversityStatus,
    #[serde(with = "log_float_opt")]
    pub loss: Option<f64>,
}

impl SignSummary for MetricRecord {
    fn step(&self) -> u64 {
        self.step
    }
    fn mean(&self) -> f64 {
        self.sa_mean
    }
    fn frac_positive(&self) -> f64 {
        self.sa_frac_positive
    }
    fn frac_negative(&self) -> f64 {
        self.sa_frac_negative
    }
}

mod log_float {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("NaN")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Tag(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("invalid number '{other}'"))),
            },
        }
    }
}

mod log_float_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    struct Wrap(#[serde(with = "super::log_float")] f64);

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match x {
            Some(v) => super::log_float::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

pub fn encode_record(record: &MetricRecord) -> String {
    serde_json::to_string(record).expect("metric records always serialize")
}

/// Appends one record as a full line and flushes.
pub fn append_metric(path: impl AsRef<Path>, record: &MetricRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = encode_record(record);
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Buffered appender for bulk output. Each record is written as one line.
pub struct MetricLogWriter {
    out: BufWriter<File>,
}

impl MetricLogWriter {
    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        let mut line = encode_record(record);
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for MetricLogWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Parses a metric log, skipping blank lines. Steps must be non-decreasing.
pub fn parse_metric_log(text: &str) -> Result<Vec<MetricRecord>> {
    let mut out: Vec<MetricRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        push_line(&mut out, i + 1, line)?;
    }
    Ok(out)
}

pub fn read_metric_log(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        push_line(&mut out, i + 1, &line)?;
    }
    Ok(out)
}

fn push_line(out: &mut Vec<MetricRecord>, line_no: usize, line: &str) -> Result<()> {
    if line.trim().is_empty() {
        return Ok(());
    }
    let rec: MetricRecord =
        serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
    if let Some(prev) = out.last() {
        if rec.step < prev.step {
            return Err(Error::OrderViolation { line: line_no, previous: prev.step, step: rec.step });
        }
    }
    out.push(rec);
    Ok(())
}
