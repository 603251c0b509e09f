use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, DatasetSpec};
use super::model::{batch_pass, BatchPass, MlpState};
use crate::analyze::measure_layer;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sa::{detect_collapse, ActivationBatch, CollapseConfig, DiversityStatus, DiversityVerdict};
use crate::snapshot::{write_snapshot, MetricRecord, NamedTensor, Snapshot};

pub const DEFAULT_EXPLOSION_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: u64,
    /// Mini-batch size; `0` or anything ≥ the dataset size means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub dataset: DatasetSpec,
    pub log_every: u64,
    pub explosion_factor: f64,
    pub collapse: CollapseConfig,
    /// Write a SASN snapshot of every monitored layer each `snapshot_every`
    /// steps into `snapshot_dir` (0 disables).
    pub snapshot_every: u64,
    pub snapshot_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be at least 1".into()));
        }
        if !(self.explosion_factor > 1.0) {
            return Err(Error::InvalidConfig(format!("explosion_factor must exceed 1, got {}", self.explosion_factor)));
        }
        if self.snapshot_every > 0 && self.snapshot_dir.is_none() {
            return Err(Error::InvalidConfig("snapshot_every set without snapshot_dir".into()));
        }
        self.collapse.validate()?;
        self.dataset.validate()
    }
}

/// Outcome of one training run. `records` holds one entry per monitored
/// layer per logged step, in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub records: Vec<MetricRecord>,
    pub losses: Vec<f64>,
    pub initial_loss: Option<f64>,
    pub explosion_step: Option<u64>,
    /// Earliest collapse onset over all monitored layers.
    pub collapse_onset: Option<u64>,
    pub verdicts: Vec<(usize, DiversityVerdict)>,
    pub steps_run: u64,
    /// Numeric failure that ended the run early, if any.
    pub aborted: Option<String>,
}

pub fn layer_name(l: usize) -> String {
    format!("layer{l}")
}

struct LayerMonitor {
    layer: usize,
    prev_u1: Option<Vec<f64>>,
    history: Vec<MetricRecord>,
}

/// Plain gradient descent with SA monitoring of the layers in `monitors`
/// (1-based). Stops at the first step whose loss is non-finite or exceeds
/// `explosion_factor` times the initial loss.
pub fn train_scenario(model: &mut MlpState, cfg: &TrainConfig, monitors: &[usize]) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.dataset.dim != model.input_dim() {
        return Err(Error::InvalidConfig(format!(
            "dataset dim {} does not match model input {}",
            cfg.dataset.dim,
            model.input_dim()
        )));
    }
    if cfg.dataset.n_classes != model.n_classes() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, model outputs {}",
            cfg.dataset.n_classes,
            model.n_classes()
        )));
    }
    if let Some(&l) = monitors.iter().find(|&&l| l == 0 || l > model.depth()) {
        return Err(Error::InvalidConfig(format!("monitored layer {l} outside 1..={}", model.depth())));
    }
    let data = cfg.dataset.generate()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = if cfg.batch_size == 0 || cfg.batch_size >= data.len() { data.len() } else { cfg.batch_size };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cursor = data.len();

    let mut mons: Vec<LayerMonitor> =
        monitors.iter().map(|&layer| LayerMonitor { layer, prev_u1: None, history: Vec::new() }).collect();
    let mut run = TrainRun {
        records: Vec::new(),
        losses: Vec::new(),
        initial_loss: None,
        explosion_step: None,
        collapse_onset: None,
        verdicts: Vec::new(),
        steps_run: 0,
        aborted: None,
    };

    for step in 0..cfg.steps {
        if cursor + batch > data.len() {
            if batch < data.len() {
                order.shuffle(&mut rng);
            }
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;

        let pass = match batch_pass(model, &data.input_refs(idx), &data.target_subset(idx)) {
            Ok(p) if p.loss.is_finite() && p.grads.iter().all(Matrix::is_finite) => p,
            Ok(_) | Err(Error::NonFinite(_)) => {
                run.explosion_step = Some(step);
                run.losses.push(f64::INFINITY);
                run.records.extend(mons.iter().map(|m| diverged_record(m, step, f64::INFINITY)));
                break;
            }
            Err(e) => return Err(e),
        };
        let initial = *run.initial_loss.get_or_insert(pass.loss);
        run.losses.push(pass.loss);
        let exploded = pass.loss > cfg.explosion_factor * initial;

        if step % cfg.log_every == 0 || exploded {
            for m in &mut mons {
                match monitor_layer(model, &pass, m, step, cfg) {
                    Ok(rec) => {
                        m.history.push(rec.clone());
                        run.records.push(rec);
                    }
                    Err(e) => {
                        run.aborted = Some(format!("monitoring {} at step {step}: {e}", layer_name(m.layer)));
                    }
                }
            }
            if cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 {
                dump_snapshot(model, &pass, monitors, step, cfg)?;
            }
        }
        if exploded {
            run.explosion_step = Some(step);
            break;
        }
        if run.aborted.is_some() {
            break;
        }
        model.apply_gradients(&pass.grads, cfg.eta)?;
        run.steps_run = step + 1;
        if !model.is_finite() {
            run.explosion_step = Some(step + 1);
            run.losses.push(f64::INFINITY);
            run.records.extend(mons.iter().map(|m| diverged_record(m, step + 1, f64::INFINITY)));
            break;
        }
    }
    if let Some(e) = run.explosion_step {
        run.steps_run = e;
    }

    for m in &mons {
        if m.history.is_empty() {
            continue;
        }
        let v = detect_collapse(&m.history, &cfg.collapse)?;
        if let Some(on) = v.onset_step {
            if v.status == DiversityStatus::Collapsed {
                run.collapse_onset = Some(run.collapse_onset.map_or(on, |o: u64| o.min(on)));
            }
        }
        run.verdicts.push((m.layer, v));
    }
    Ok(run)
}

/// Rows `h⁽ˡ⁻¹⁾` of every sample in the pass.
pub fn layer_inputs(pass: &BatchPass, l: usize, step: u64) -> Result<ActivationBatch> {
    let rows: Vec<Vec<f64>> = pass.traces.iter().map(|t| t.input(l).to_vec()).collect();
    ActivationBatch::from_rows(&rows, step)
}

fn monitor_layer(
    model: &MlpState,
    pass: &BatchPass,
    m: &mut LayerMonitor,
    step: u64,
    cfg: &TrainConfig,
) -> Result<MetricRecord> {
    let acts = layer_inputs(pass, m.layer, step)?;
    let (mut rec, u1) = measure_layer(
        &layer_name(m.layer),
        step,
        model.weight(m.layer),
        Some(&pass.grads[m.layer - 1]),
        &acts,
        m.prev_u1.as_deref(),
        cfg.collapse.zero_band,
        Some(pass.loss),
    )?;
    m.prev_u1 = Some(u1);
    let mut series = m.history.clone();
    series.push(rec.clone());
    rec.verdict = detect_collapse(&series, &cfg.collapse)?.status;
    Ok(rec)
}

/// Placeholder row for a step whose forward pass diverged.
fn diverged_record(m: &LayerMonitor, step: u64, loss: f64) -> MetricRecord {
    MetricRecord {
        step,
        layer: layer_name(m.layer),
        sa_mean: f64::NAN,
        sa_frac_positive: f64::NAN,
        sa_frac_negative: f64::NAN,
        sa_quantiles: [f64::NAN; 5],
        weight_sigma1: f64::NAN,
        grad_sigma1: None,
        stable_rank: f64::NAN,
        max_activation: f64::NAN,
        pathology_median: f64::NAN,
        verdict: m.history.last().map_or(DiversityStatus::Healthy, |r| r.verdict),
        loss: Some(loss),
    }
}

fn dump_snapshot(model: &MlpState, pass: &BatchPass, monitors: &[usize], step: u64, cfg: &TrainConfig) -> Result<()> {
    let dir = cfg.snapshot_dir.as_ref().expect("validated");
    std::fs::create_dir_all(dir)?;
    let mut snap = Snapshot::new(step);
    for &l in monitors {
        let name = layer_name(l);
        snap = snap
            .with(NamedTensor::from_matrix(format!("{name}.weight"), model.weight(l)))
            .with(NamedTensor::from_batch(format!("{name}.input"), &layer_inputs(pass, l, step)?))
            .with(NamedTensor::from_matrix(format!("{name}.grad"), &pass.grads[l - 1]));
    }
    write_snapshot(dir.join(format!("step_{step:08}.sasn")), &snap)
}

/// Built-in toy scenarios. Both use the same model shape and data; only the
/// learning rate differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Stable,
    Explosive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub dims: Vec<usize>,
    pub monitors: Vec<usize>,
    pub train: TrainConfig,
}

impl Scenario {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stable" => Some(Self::Stable),
            "explosive" => Some(Self::Explosive),
            _ => None,
        }
    }

    pub fn default_eta(self) -> f64 {
        match self {
            Scenario::Stable => STABLE_ETA,
            Scenario::Explosive => EXPLOSIVE_ETA,
        }
    }

    pub fn defaults(self, seed: u64) -> ScenarioConfig {
        let dims = vec![DIM, HIDDEN, HIDDEN, CLASSES];
        ScenarioConfig {
            scenario: self,
            dims,
            monitors: vec![1],
            train: TrainConfig {
                eta: self.default_eta(),
                steps: DEFAULT_STEPS,
                batch_size: BATCH,
                seed,
                init_scale: INIT_SCALE,
                dataset: DatasetSpec {
                    kind: super::data::DatasetKind::GaussianClusters,
                    n_classes: CLASSES,
                    dim: DIM,
                    n_samples: SAMPLES,
                    cluster_spread: SPREAD,
                    shift: SHIFT,
                    seed: DATA_SEED,
                },
                log_every: 1,
                explosion_factor: DEFAULT_EXPLOSION_FACTOR,
                collapse: CollapseConfig::default(),
                snapshot_every: 0,
                snapshot_dir: None,
            },
        }
    }
}

// Calibrated by sweeping seeds; see the README for the resulting margins.
const DIM: usize = 256;
const HIDDEN: usize = 64;
const CLASSES: usize = 10;
const SAMPLES: usize = 512;
const SPREAD: f64 = 3.0;
const SHIFT: f64 = 20.0;
const DATA_SEED: u64 = 7;
const BATCH: usize = 32;
const INIT_SCALE: f64 = 0.35;
const DEFAULT_STEPS: u64 = 200;
const STABLE_ETA: f64 = 1e-3;
const EXPLOSIVE_ETA: f64 = 2.0;

impl ScenarioConfig {
    pub fn init_model(&self) -> Result<MlpState> {
        super::model::init_mlp(&self.dims, self.train.seed, self.train.init_scale)
    }

    pub fn run(&self) -> Result<(MlpState, TrainRun)> {
        let mut model = self.init_model()?;
        let run = train_scenario(&mut model, &self.train, &self.monitors)?;
        Ok((model, run))
    }
}

/// Dataset for the scenario, regenerated from its spec.
pub fn scenario_data(cfg: &ScenarioConfig) -> Result<Dataset> {
    cfg.train.dataset.generate()
}
