//! Offline analysis: snapshot series to metric records, and metric logs to
//! lead-time reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{power_iteration, Matrix, PowerConfig};
use crate::sa::{
    baseline_metrics_with, detect_collapse, pathology_median, sa_distribution_with, ActivationBatch, CollapseConfig,
    DiversityStatus, DiversityVerdict,
};
use crate::snapshot::{read_snapshot, FiniteCheck, MetricRecord, Snapshot};

/// All per-step metrics of one layer. The verdict is left `Healthy`; it
/// depends on the history and is filled in by the caller. Returns the record
/// and the canonicalized `u₁` to carry to the next step.
#[allow(clippy::too_many_arguments)]
pub fn measure_layer(
    layer: &str,
    step: u64,
    w: &Matrix,
    grad: Option<&Matrix>,
    acts: &ActivationBatch,
    prev_u1: Option<&[f64]>,
    zero_band: f64,
    loss: Option<f64>,
) -> Result<(MetricRecord, Vec<f64>)> {
    if acts.n_features() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{layer}: activations have {} features, weight has {} rows",
            acts.n_features(),
            w.rows()
        )));
    }
    let cfg = PowerConfig::default();
    let spec = power_iteration(w, &cfg)?.canonicalized(prev_u1);
    let dist = sa_distribution_with(acts, &spec.u1, zero_band)?;
    let base = baseline_metrics_with(w, &spec, grad, acts, &cfg)?;
    let rec = MetricRecord {
        step,
        layer: layer.to_string(),
        sa_mean: dist.mean,
        sa_frac_positive: dist.frac_positive,
        sa_frac_negative: dist.frac_negative,
        sa_quantiles: dist.quantiles.as_array(),
        weight_sigma1: base.weight_sigma1,
        grad_sigma1: base.grad_sigma1,
        stable_rank: base.stable_rank,
        max_activation: base.max_activation,
        pathology_median: pathology_median(acts, &spec.u1)?,
        verdict: DiversityStatus::Healthy,
        loss,
    };
    Ok((rec, spec.u1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    pub weight: String,
    pub input: String,
    pub grad: Option<String>,
    /// Layer label written into each record.
    pub layer: String,
    pub collapse: CollapseConfig,
    pub finite: FiniteMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiniteMode {
    Strict,
    Lenient,
}

impl From<FiniteMode> for FiniteCheck {
    fn from(m: FiniteMode) -> Self {
        match m {
            FiniteMode::Strict => FiniteCheck::Strict,
            FiniteMode::Lenient => FiniteCheck::Lenient,
        }
    }
}

impl AnalyzeConfig {
    pub fn new(weight: impl Into<String>, input: impl Into<String>) -> Self {
        let weight = weight.into();
        let layer = weight.strip_suffix(".weight").unwrap_or(&weight).to_string();
        Self {
            weight,
            input: input.into(),
            grad: None,
            layer,
            collapse: CollapseConfig::default(),
            finite: FiniteMode::Strict,
        }
    }
}

/// Stateful analyzer for one layer. Snapshots must arrive in strictly
/// increasing step order; the sign of `u₁` is carried between them.
#[derive(Debug, Clone)]
pub struct Analyzer {
    cfg: AnalyzeConfig,
    prev_u1: Option<Vec<f64>>,
    records: Vec<MetricRecord>,
}

impl Analyzer {
    pub fn new(cfg: AnalyzeConfig) -> Result<Self> {
        cfg.collapse.validate()?;
        Ok(Self { cfg, prev_u1: None, records: Vec::new() })
    }

    pub fn config(&self) -> &AnalyzeConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricRecord> {
        self.records
    }

    fn tensor(snap: &Snapshot, name: &str) -> Result<Matrix> {
        snap.get(name)
            .ok_or_else(|| Error::BadInput(format!("tensor '{name}' not found in snapshot at step {}", snap.step)))?
            .to_matrix()
    }

    pub fn push(&mut self, snap: &Snapshot) -> Result<&MetricRecord> {
        if let Some(last) = self.records.last() {
            if snap.step <= last.step {
                return Err(Error::BadInput(format!("snapshot step {} does not follow step {}", snap.step, last.step)));
            }
        }
        let w = Self::tensor(snap, &self.cfg.weight)?;
        let acts = ActivationBatch::from_matrix(Self::tensor(snap, &self.cfg.input)?, snap.step);
        let grad = match &self.cfg.grad {
            Some(name) => {
                let g = Self::tensor(snap, name)?;
                if g.shape() != w.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient '{name}' is {:?}, weight is {:?}",
                        g.shape(),
                        w.shape()
                    )));
                }
                Some(g)
            }
            None => None,
        };
        let (mut rec, u1) = measure_layer(
            &self.cfg.layer,
            snap.step,
            &w,
            grad.as_ref(),
            &acts,
            self.prev_u1.as_deref(),
            self.cfg.collapse.zero_band,
            None,
        )
        .map_err(|e| match e {
            Error::ShapeMismatch(m) => {
                Error::ShapeMismatch(format!("'{}' vs '{}': {m}", self.cfg.input, self.cfg.weight))
            }
            other => other,
        })?;
        self.records.push(rec.clone());
        rec.verdict = detect_collapse(&self.records, &self.cfg.collapse)?.status;
        self.prev_u1 = Some(u1);
        *self.records.last_mut().unwrap() = rec;
        Ok(self.records.last().unwrap())
    }

    pub fn verdict(&self) -> Result<DiversityVerdict> {
        detect_collapse(&self.records, &self.cfg.collapse)
    }
}

/// Expands directories into their `*.sasn` files; plain paths are kept.
pub fn collect_snapshot_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.is_file() && is_snapshot_path(q))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// A snapshot that failed to load, with the file it came from.
#[derive(Debug)]
pub struct FileError {
    pub path: PathBuf,
    pub error: Error,
}

impl std::fmt::Display for FileError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.error)
    }
}

impl std::error::Error for FileError {}

/// Reads and analyzes snapshots one at a time in the given order. The
/// embedded steps must be strictly increasing.
pub fn analyze_series(analyzer: &mut Analyzer, paths: &[PathBuf]) -> std::result::Result<(), FileError> {
    let check = analyzer.config().finite.into();
    for p in paths {
        let read = read_snapshot(p, check).map_err(|error| FileError { path: p.clone(), error })?;
        analyzer.push(&read.snapshot).map_err(|error| FileError { path: p.clone(), error })?;
    }
    Ok(())
}

/// Levels at which a baseline metric is considered alarming.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub weight_sigma1: Option<f64>,
    pub grad_sigma1: Option<f64>,
    pub max_activation: Option<f64>,
    /// Crossed when the stable rank falls below this value.
    pub stable_rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub metric: String,
    pub threshold: f64,
    pub step: Option<u64>,
    pub lead: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub records: usize,
    pub verdict: DiversityVerdict,
    /// Collapse onset; warnings are not counted.
    pub onset: Option<u64>,
    /// Explosion step minus onset.
    pub onset_lead: Option<i64>,
    pub crossings: Vec<Crossing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogReport {
    pub explosion_step: Option<u64>,
    pub initial_loss: Option<f64>,
    pub layers: Vec<LayerReport>,
}

impl LogReport {
    pub fn worst_status(&self) -> DiversityStatus {
        let rank = |s: DiversityStatus| match s {
            DiversityStatus::Healthy => 0,
            DiversityStatus::Warning => 1,
            DiversityStatus::Collapsed => 2,
        };
        self.layers.iter().map(|l| l.verdict.status).max_by_key(|&s| rank(s)).unwrap_or(DiversityStatus::Healthy)
    }

    pub fn earliest_onset(&self) -> Option<u64> {
        self.layers.iter().filter_map(|l| l.onset).min()
    }
}

/// First step whose loss is non-finite or exceeds `factor` times the first
/// recorded loss.
pub fn explosion_step(records: &[MetricRecord], factor: f64) -> Option<u64> {
    let mut initial = None;
    for r in records {
        let Some(loss) = r.loss else { continue };
        if !loss.is_finite() {
            return Some(r.step);
        }
        let init = *initial.get_or_insert(loss);
        if loss > factor * init {
            return Some(r.step);
        }
    }
    None
}

pub fn summarize_log(
    records: &[MetricRecord],
    thresholds: &Thresholds,
    collapse: &CollapseConfig,
    explosion_factor: f64,
) -> Result<LogReport> {
    if records.is_empty() {
        return Err(Error::EmptySeries);
    }
    let explosion = explosion_step(records, explosion_factor);
    let lead = |s: u64| explosion.map(|e| e as i64 - s as i64);

    let mut by_layer: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_layer.entry(r.layer.as_str()).or_default().push(r);
    }
    let mut layers = Vec::new();
    for (name, recs) in by_layer {
        let owned: Vec<MetricRecord> = recs.iter().map(|r| (*r).clone()).collect();
        let verdict = detect_collapse(&owned, collapse)?;
        let onset = match verdict.status {
            DiversityStatus::Collapsed => verdict.onset_step,
            _ => None,
        };
        let mut crossings = Vec::new();
        let mut check = |metric: &str,
                         threshold: Option<f64>,
                         get: &dyn Fn(&MetricRecord) -> Option<f64>,
                         below: bool| {
            if let Some(t) = threshold {
                let step =
                    owned.iter().find(|r| get(r).is_some_and(|v| if below { v < t } else { v > t })).map(|r| r.step);
                crossings.push(Crossing { metric: metric.to_string(), threshold: t, step, lead: step.and_then(lead) });
            }
        };
        check("weight_sigma1", thresholds.weight_sigma1, &|r| Some(r.weight_sigma1), false);
        check("grad_sigma1", thresholds.grad_sigma1, &|r| r.grad_sigma1, false);
        check("max_activation", thresholds.max_activation, &|r| Some(r.max_activation), false);
        check("stable_rank", thresholds.stable_rank, &|r| Some(r.stable_rank), true);
        layers.push(LayerReport {
            layer: name.to_string(),
            records: owned.len(),
            verdict,
            onset,
            onset_lead: onset.and_then(lead),
            crossings,
        });
    }
    Ok(LogReport { explosion_step: explosion, initial_loss: records.iter().find_map(|r| r.loss), layers })
}

pub fn is_snapshot_path(p: &Path) -> bool {
    p.extension().is_some_and(|x| x == "sasn")
}
