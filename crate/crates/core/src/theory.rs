//! Executable checks of the gradient expression, the first-order
//! spectral-norm perturbation, spectral-norm growth under pathological
//! alignment, the logit-deviation sign and activation amplification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    dot, first_order_spectral_change_with, norm2, normalize, power_iteration, random_unit_vector, svd_small_oracle,
    Matrix, PowerConfig, SpectralTriple,
};
use crate::mlp::{
    backward_exact, batch_pass, forward, init_mlp, output_error, sample_loss, softmax_cross_entropy, BatchPass,
    DatasetKind, DatasetSpec, ForwardTrace, MlpState,
};
use crate::sa::{alignment_decomposition, pathology_median, ActivationBatch};

/// Mean-field path-activation factor and the per-layer active fractions it
/// is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldEstimate {
    pub rho: f64,
    pub per_layer_active_fractions: Vec<f64>,
}

/// Fraction of active units in each hidden layer `l … L−1`, averaged over
/// traces and units, and their product.
pub fn estimate_rho(traces: &[ForwardTrace], l: usize) -> Result<MeanFieldEstimate> {
    let first = traces.first().ok_or(Error::EmptyTraces)?;
    let depth = first.depth();
    if l == 0 || l >= depth {
        return Err(Error::BadInput(format!("rho is defined for hidden layers 1..{}, got layer {l}", depth - 1)));
    }
    if traces.iter().any(|t| t.depth() != depth) {
        return Err(Error::TraceMismatch("traces come from networks of different depth".into()));
    }
    let mut fractions = Vec::with_capacity(depth - l);
    for k in l..depth {
        let width = first.active_masks[k - 1].len();
        let mut active = 0usize;
        for t in traces {
            let m = &t.active_masks[k - 1];
            if m.len() != width {
                return Err(Error::TraceMismatch(format!("layer {k} width differs between traces")));
            }
            active += m.iter().filter(|&&on| on).count();
        }
        fractions.push(active as f64 / (width * traces.len()) as f64);
    }
    Ok(MeanFieldEstimate { rho: fractions.iter().product(), per_layer_active_fractions: fractions })
}

#[derive(Clone, Copy, PartialEq)]
enum InteriorMasks {
    Traced,
    AllOnes,
}

fn diag_mask(mask: &[bool], policy: InteriorMasks) -> Matrix {
    let d: Vec<f64> = mask.iter().map(|&on| if on || policy == InteriorMasks::AllOnes { 1.0 } else { 0.0 }).collect();
    Matrix::from_diag(&d)
}

/// `(h⁽ˡ⁻¹⁾)ᵀ · ρ(p−t) · Π_{k=L…l+1}(W_kᵀ D_{k−1}) · D_l` as a chain of dense
/// matrix products. With `AllOnes` every `D_{k−1}` inside the product is the
/// identity; the trailing `D_l` is always the traced mask.
fn chain_product(
    model: &MlpState,
    trace: &ForwardTrace,
    p: &[f64],
    target: usize,
    rho: f64,
    l: usize,
    policy: InteriorMasks,
) -> Result<Matrix> {
    let depth = model.depth();
    if l == 0 || l > depth {
        return Err(Error::BadInput(format!("layer {l} outside 1..={depth}")));
    }
    if trace.depth() != depth || trace.input(l).len() != model.weight(l).rows() {
        return Err(Error::ShapeMismatch("trace does not match model".into()));
    }
    if p.len() != model.n_classes() {
        return Err(Error::ShapeMismatch(format!(
            "probability vector has length {}, model has {} classes",
            p.len(),
            model.n_classes()
        )));
    }
    if target >= p.len() {
        return Err(Error::BadTarget { target, classes: p.len() });
    }
    let err: Vec<f64> = output_error(p, target).iter().map(|e| rho * e).collect();
    let mut chain = Matrix::new(1, err.len(), err)?;
    for k in (l + 1..=depth).rev() {
        chain = chain.matmul(&model.weight(k).transpose())?;
        chain = chain.matmul(&diag_mask(&trace.mask(k - 1), policy))?;
    }
    if l < depth {
        chain = chain.matmul(&diag_mask(&trace.mask(l), InteriorMasks::Traced))?;
    }
    let h = trace.input(l);
    Matrix::new(h.len(), 1, h.to_vec())?.matmul(&chain)
}

/// Exact per-sample gradient of `W_l` evaluated literally as the product of
/// transposed weights and diagonal activation masks.
pub fn product_formula_gradient(
    model: &MlpState,
    trace: &ForwardTrace,
    p: &[f64],
    target: usize,
    l: usize,
) -> Result<Matrix> {
    chain_product(model, trace, p, target, 1.0, l, InteriorMasks::Traced)
}

/// Mean-field approximation: the downstream masks are replaced by the scalar
/// `rho`; the mask of layer `l` itself is kept.
pub fn approx_gradient(
    model: &MlpState,
    trace: &ForwardTrace,
    p: &[f64],
    target: usize,
    rho: f64,
    l: usize,
) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::BadInput(format!("rho must lie in [0, 1], got {rho}")));
    }
    if l >= model.depth() {
        return Err(Error::BadInput(format!(
            "the approximation applies to hidden layers 1..{}, got {l}",
            model.depth() - 1
        )));
    }
    chain_product(model, trace, p, target, rho, l, InteriorMasks::AllOnes)
}

/// Cosine similarity of two matrices flattened row-major; 0 when either is zero.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (na, nb) = (norm2(a.data()), norm2(b.data()));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(a.data(), b.data()) / (na * nb))
}

/// Denominator floor of the finite-difference relative error.
pub const FD_REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `(layer, row, col)` of the worst entry, 1-based layer.
    pub worst: (usize, usize, usize),
    pub entries: usize,
}

/// Compares every entry of `backward_exact` with a central difference of the
/// loss using step `rel_step · max(1, |w|)`. The relative error of an entry
/// is `|a − b| / max(|a|, |b|, FD_REL_FLOOR)`.
pub fn finite_difference_check(model: &MlpState, x: &[f64], target: usize, rel_step: f64) -> Result<FdReport> {
    let trace = forward(model, x)?;
    let (_, p) = softmax_cross_entropy(trace.logits(), target)?;
    let grads = backward_exact(model, &trace, &p, target)?;
    let mut probe = model.clone();
    let mut report = FdReport { max_rel_err: 0.0, worst: (1, 0, 0), entries: 0 };
    for l in 1..=model.depth() {
        let (r, c) = model.weight(l).shape();
        for i in 0..r {
            for j in 0..c {
                let w = model.weight(l)[(i, j)];
                let h = rel_step * w.abs().max(1.0);
                probe.weight_mut(l)[(i, j)] = w + h;
                let up = sample_loss(&probe, x, target)?;
                probe.weight_mut(l)[(i, j)] = w - h;
                let down = sample_loss(&probe, x, target)?;
                probe.weight_mut(l)[(i, j)] = w;
                let fd = (up - down) / (2.0 * h);
                let g = grads[l - 1][(i, j)];
                let err = (fd - g).abs() / fd.abs().max(g.abs()).max(FD_REL_FLOOR);
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = (l, i, j);
                }
                report.entries += 1;
            }
        }
    }
    Ok(report)
}

/// The logit deviation `(p−t)·z` in its two algebraically equal forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitDeviation {
    /// `dot(p − t, z)`.
    pub dot_form: f64,
    /// `Σ pᵢzᵢ − z_k`.
    pub expectation_form: f64,
}

impl LogitDeviation {
    pub fn value(&self) -> f64 {
        self.dot_form
    }
}

pub fn logit_deviation(p: &[f64], target: usize, z: &[f64]) -> Result<LogitDeviation> {
    if p.len() != z.len() || p.is_empty() {
        return Err(Error::BadInput(format!("{} probabilities for {} logits", p.len(), z.len())));
    }
    if target >= p.len() {
        return Err(Error::BadInput(format!("target {target} out of range for {} classes", p.len())));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadInput(format!("not a probability vector (sum {total})")));
    }
    let dot_form = dot(&output_error(p, target), z);
    let expectation_form = dot(p, z) - z[target];
    let scale = z.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if (dot_form - expectation_form).abs() > 1e-10 * scale {
        return Err(Error::BadInput(format!("logit deviation forms disagree: {dot_form} vs {expectation_form}")));
    }
    Ok(LogitDeviation { dot_form, expectation_form })
}

/// Per-sample quantities entering the growth prediction for one layer.
#[derive(Debug, Clone, Copy)]
pub struct SampleTerms<'a> {
    /// Layer input `h⁽ˡ⁻¹⁾`.
    pub h: &'a [f64],
    /// Pre-activation `f⁽ˡ⁾`.
    pub f: &'a [f64],
    pub p: &'a [f64],
    pub target: usize,
    pub logits: &'a [f64],
}

impl<'a> SampleTerms<'a> {
    pub fn from_trace(trace: &'a ForwardTrace, l: usize, p: &'a [f64], target: usize) -> Self {
        Self { h: trace.input(l), f: trace.preact(l), p, target, logits: trace.logits() }
    }
}

/// `−ηρα ⟨v₁, f⟩/‖f‖ · ‖h‖² · (p−t)·z` for one sample.
///
/// The product `α⟨v₁, f⟩` does not depend on the sign convention of the
/// singular pair.
pub fn predict_delta_specnorm(
    w: &Matrix,
    spec: &SpectralTriple,
    s: &SampleTerms<'_>,
    eta: f64,
    rho: f64,
) -> Result<f64> {
    if s.h.len() != w.rows() || s.f.len() != w.cols() || spec.u1.len() != w.rows() {
        return Err(Error::ShapeMismatch("sample terms do not match the weight".into()));
    }
    let dec = alignment_decomposition(s.h, &spec.u1)?;
    let fnorm = norm2(s.f);
    if fnorm == 0.0 {
        return Err(Error::ZeroInput);
    }
    let proj = dot(&spec.v1, s.f) / fnorm;
    let hn = norm2(s.h);
    let ld = logit_deviation(s.p, s.target, s.logits)?.value();
    Ok(-eta * rho * dec.alpha * proj * hn * hn * ld)
}

fn oracle_sigma1(w: &Matrix) -> Result<f64> {
    Ok(svd_small_oracle(w)?[0].sigma)
}

fn tight_power() -> PowerConfig {
    PowerConfig::default().with_tol(1e-13).with_max_iters(100_000)
}

/// Where the batch sits relative to the constructed principal direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// Inputs are positive multiples of `u₁`.
    Aligned,
    /// Inputs are orthogonal to `u₁`.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedAlignmentConfig {
    /// Network widths `[n₀, n₁, …, K]`; the constructed layer is `W_1`.
    pub dims: Vec<usize>,
    pub batch: usize,
    /// Spectral norm of the rank-one part of `W_1`.
    pub sigma: f64,
    /// Scale of the i.i.d. Gaussian matrix added to the rank-one part.
    pub noise: f64,
    /// Multiplier on the `1/√fan_in` scale of the upper layers.
    pub upper_scale: f64,
    pub geometry: Geometry,
    /// Step size used while pre-training the upper layers.
    pub pretrain_eta: f64,
    pub pretrain_budget: usize,
    pub seed: u64,
}

impl Default for ForcedAlignmentConfig {
    fn default() -> Self {
        Self {
            dims: vec![8, 12, 10],
            batch: 16,
            sigma: 1.0,
            noise: 0.0,
            upper_scale: 1.0,
            geometry: Geometry::Aligned,
            pretrain_eta: 0.1,
            pretrain_budget: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub layer: usize,
    pub eta: f64,
    /// Batch mean of the per-sample predictions.
    pub predicted_delta: f64,
    /// `σ₁` after minus before one gradient step, both from the dense oracle.
    pub actual_delta: f64,
    pub sigma1_before: f64,
    pub alpha: f64,
    pub proj_f_v1: f64,
    pub logit_dev: f64,
    pub rho: f64,
    pub pathology_ratio: f64,
    pub sign_agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationReport {
    pub steps: usize,
    /// Batch mean of `‖f⁽ˡ⁾‖₂` before each step.
    pub preact_norms: Vec<f64>,
    pub sigma1_series: Vec<f64>,
    /// `‖∂L/∂W_l‖_F` of the batch gradient at each step.
    pub grad_frob_series: Vec<f64>,
    pub pathology_series: Vec<f64>,
    /// Largest `|‖f‖/(β·σ₁) − 1|` over samples and steps, `β = ⟨h, u₁⟩`.
    pub ratio_consistency: f64,
}

impl AmplificationReport {
    pub fn sigma1_strictly_increasing(&self) -> bool {
        self.sigma1_series.windows(2).all(|w| w[1] > w[0])
    }

    pub fn grad_non_decreasing(&self) -> bool {
        self.grad_frob_series.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn preact_non_decreasing(&self) -> bool {
        self.preact_norms.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Upper bound on the batch pathology ratio for the aligned construction.
pub const PATHOLOGY_LIMIT: f64 = 0.1;
/// Ratio above which an amplification run counts as having left the regime.
pub const PATHOLOGY_LOST: f64 = 0.5;

/// A small MLP whose first layer is a rank-one matrix (plus noise) aimed at a
/// one-directional batch, with the upper layers trained until every sample
/// has negative logit deviation.
#[derive(Debug, Clone)]
pub struct ForcedAlignment {
    pub model: MlpState,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub direction: Vec<f64>,
    pub pretrain_steps: usize,
}

impl ForcedAlignment {
    pub fn build(cfg: &ForcedAlignmentConfig) -> Result<Self> {
        if cfg.dims.len() < 3 || cfg.batch == 0 {
            return Err(Error::InvalidConfig("need at least one hidden layer and a nonempty batch".into()));
        }
        if !(cfg.sigma > 0.0) || !(cfg.noise >= 0.0) || !(cfg.upper_scale > 0.0) {
            return Err(Error::InvalidConfig("sigma and upper_scale must be positive, noise nonnegative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (n0, n1) = (cfg.dims[0], cfg.dims[1]);
        let hat = random_unit_vector(n0, &mut rng);
        let mut v: Vec<f64> = (0..n1).map(|_| rng.random_range(0.5..1.5)).collect();
        normalize(&mut v);
        let mut w1 = Matrix::outer(&hat, &v).scaled(cfg.sigma);
        if cfg.noise > 0.0 {
            w1.add_scaled(cfg.noise, &Matrix::random_normal(n0, n1, 1.0, &mut rng))?;
        }
        let mut weights = vec![w1];
        for k in 1..cfg.dims.len() - 1 {
            let (fan_in, fan_out) = (cfg.dims[k], cfg.dims[k + 1]);
            weights.push(Matrix::random_normal(fan_in, fan_out, cfg.upper_scale / (fan_in as f64).sqrt(), &mut rng));
        }
        let mut model = MlpState::from_weights(weights)?;

        let spec = power_iteration(model.weight(1), &tight_power())?.canonicalized(Some(&hat));
        let direction = match cfg.geometry {
            Geometry::Aligned => hat,
            Geometry::Orthogonal => {
                let mut g: Vec<f64> = (0..n0).map(|_| StandardNormal.sample(&mut rng)).collect();
                let a = dot(&g, &spec.u1);
                g.iter_mut().zip(&spec.u1).for_each(|(x, u)| *x -= a * u);
                let a = dot(&g, &spec.u1);
                g.iter_mut().zip(&spec.u1).for_each(|(x, u)| *x -= a * u);
                normalize(&mut g);
                g
            }
        };
        let inputs: Vec<Vec<f64>> = (0..cfg.batch)
            .map(|_| {
                let c: f64 = rng.random_range(0.75..1.25);
                direction.iter().map(|d| c * d).collect()
            })
            .collect();
        let targets = vec![0; cfg.batch];

        let mut fa = Self { model: model.clone(), inputs, targets, direction, pretrain_steps: 0 };
        if cfg.geometry == Geometry::Aligned {
            let ratio = fa.pathology_ratio()?;
            if ratio > PATHOLOGY_LIMIT {
                return Err(Error::InvalidConfig(format!(
                    "noise {} gives pathology ratio {ratio:.3} above {PATHOLOGY_LIMIT}",
                    cfg.noise
                )));
            }
        }
        let mut worst = fa.worst_logit_dev()?;
        while worst >= 0.0 {
            if fa.pretrain_steps == cfg.pretrain_budget {
                return Err(Error::RegionNotReached { steps: fa.pretrain_steps, worst });
            }
            let pass = fa.pass()?;
            for l in 2..=model.depth() {
                model.weight_mut(l).add_scaled(-cfg.pretrain_eta, &pass.grads[l - 1])?;
            }
            fa.model = model.clone();
            fa.pretrain_steps += 1;
            worst = fa.worst_logit_dev()?;
        }
        Ok(fa)
    }

    fn pass(&self) -> Result<BatchPass> {
        let xs: Vec<&[f64]> = self.inputs.iter().map(Vec::as_slice).collect();
        batch_pass(&self.model, &xs, &self.targets)
    }

    fn batch(&self) -> Result<ActivationBatch> {
        ActivationBatch::from_rows(&self.inputs, 0)
    }

    fn batch_mean(&self) -> Vec<f64> {
        let n = self.inputs.len() as f64;
        let mut m = vec![0.0; self.direction.len()];
        for x in &self.inputs {
            m.iter_mut().zip(x).for_each(|(a, b)| *a += b / n);
        }
        m
    }

    /// Top triple of `W_1`, oriented so that `u₁` points along the batch mean.
    pub fn spectrum(&self) -> Result<SpectralTriple> {
        let mean = self.batch_mean();
        Ok(power_iteration(self.model.weight(1), &tight_power())?.canonicalized(Some(&mean)))
    }

    pub fn pathology_ratio(&self) -> Result<f64> {
        pathology_median(&self.batch()?, &self.spectrum()?.u1)
    }

    /// Largest logit deviation over the batch.
    pub fn worst_logit_dev(&self) -> Result<f64> {
        let pass = self.pass()?;
        let mut worst = f64::NEG_INFINITY;
        for ((t, p), &k) in pass.traces.iter().zip(&pass.probs).zip(&self.targets) {
            worst = worst.max(logit_deviation(p, k, t.logits())?.value());
        }
        Ok(worst)
    }

    /// Predicted and actual change of `‖W_1‖₂` over one full gradient step.
    pub fn growth(&self, eta: f64) -> Result<GrowthReport> {
        let pass = self.pass()?;
        let spec = self.spectrum()?;
        let rho = estimate_rho(&pass.traces, 1)?.rho;
        let n = self.inputs.len() as f64;
        let (mut pred, mut alpha, mut proj, mut ld) = (0.0, 0.0, 0.0, 0.0);
        for ((t, p), &k) in pass.traces.iter().zip(&pass.probs).zip(&self.targets) {
            let s = SampleTerms::from_trace(t, 1, p, k);
            pred += predict_delta_specnorm(self.model.weight(1), &spec, &s, eta, rho)? / n;
            alpha += alignment_decomposition(s.h, &spec.u1)?.alpha / n;
            proj += dot(&spec.v1, s.f) / norm2(s.f) / n;
            ld += logit_deviation(p, k, t.logits())?.value() / n;
        }
        let before = oracle_sigma1(self.model.weight(1))?;
        let after = oracle_sigma1(&self.model.weight(1).plus_scaled(-eta, &pass.grads[0])?)?;
        let actual = after - before;
        Ok(GrowthReport {
            layer: 1,
            eta,
            predicted_delta: pred,
            actual_delta: actual,
            sigma1_before: before,
            alpha,
            proj_f_v1: proj,
            logit_dev: ld,
            rho,
            pathology_ratio: self.pathology_ratio()?,
            sign_agrees: (pred > 0.0) == (actual > 0.0),
        })
    }

    /// Runs `steps` full gradient steps and records the amplification series.
    pub fn amplification(&self, eta: f64, steps: usize) -> Result<AmplificationReport> {
        let mut state = self.clone();
        let mut rep = AmplificationReport {
            steps: 0,
            preact_norms: Vec::with_capacity(steps),
            sigma1_series: Vec::with_capacity(steps),
            grad_frob_series: Vec::with_capacity(steps),
            pathology_series: Vec::with_capacity(steps),
            ratio_consistency: 0.0,
        };
        for step in 0..steps {
            let pass = state.pass()?;
            let spec = state.spectrum()?;
            let sigma = oracle_sigma1(state.model.weight(1))?;
            let ratio = state.pathology_ratio()?;
            if ratio > PATHOLOGY_LOST {
                return Err(Error::PathologyLost { step, ratio, report: Box::new(rep) });
            }
            let mut mean_norm = 0.0;
            for t in &pass.traces {
                let fnorm = norm2(t.preact(1));
                let beta = dot(t.input(1), &spec.u1);
                rep.ratio_consistency = rep.ratio_consistency.max((fnorm / (beta * sigma) - 1.0).abs());
                mean_norm += fnorm / pass.traces.len() as f64;
            }
            rep.preact_norms.push(mean_norm);
            rep.sigma1_series.push(sigma);
            rep.grad_frob_series.push(pass.grads[0].frobenius_norm());
            rep.pathology_series.push(ratio);
            rep.steps += 1;
            state.model.apply_gradients(&pass.grads, eta)?;
        }
        Ok(rep)
    }
}

pub fn forced_alignment_experiment(cfg: &ForcedAlignmentConfig, eta: f64) -> Result<GrowthReport> {
    ForcedAlignment::build(cfg)?.growth(eta)
}

pub fn amplification_check(cfg: &ForcedAlignmentConfig, eta: f64, steps: usize) -> Result<AmplificationReport> {
    if steps < 5 {
        return Err(Error::InvalidConfig(format!("need at least 5 steps, got {steps}")));
    }
    ForcedAlignment::build(cfg)?.amplification(eta, steps)
}

/// Errors below this are treated as exact and exempt from the ratio check.
pub const PERTURBATION_FLOOR: f64 = 1e-12;
/// Minimum `σ₁/σ₂` for the perturbation check.
pub const MIN_SPECTRAL_GAP: f64 = 1.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub etas: Vec<f64>,
    /// `|‖A+ηB‖₂ − (σ₁ + η u₁ᵀBv₁)|` per step size.
    pub errors: Vec<f64>,
    /// `e(η)/e(η/2)` for consecutive pairs.
    pub ratios: Vec<f64>,
    pub gap: f64,
    /// The smallest pair fell below the floor.
    pub floored: bool,
}

impl PerturbationReport {
    pub fn final_ratio(&self) -> f64 {
        *self.ratios.last().expect("at least three step sizes")
    }

    pub fn passes(&self) -> bool {
        self.floored || (3.0..=5.0).contains(&self.final_ratio())
    }
}

pub fn verify_perturbation_order(a: &Matrix, b: &Matrix, etas: &[f64]) -> Result<PerturbationReport> {
    if etas.len() < 3 {
        return Err(Error::BadInput(format!("need at least 3 step sizes, got {}", etas.len())));
    }
    if etas.windows(2).any(|w| !(w[0] > 0.0) || (w[0] / w[1] - 2.0).abs() > 1e-9) {
        return Err(Error::BadInput("step sizes must be positive and halve each time".into()));
    }
    let triples = svd_small_oracle(a)?;
    let gap = match triples.get(1) {
        Some(t) if t.sigma > 0.0 => triples[0].sigma / t.sigma,
        _ => f64::INFINITY,
    };
    if gap < MIN_SPECTRAL_GAP {
        return Err(Error::DegenerateSpectrum { ratio: gap, required: MIN_SPECTRAL_GAP });
    }
    let mut errors = Vec::with_capacity(etas.len());
    for &eta in etas {
        let predicted = first_order_spectral_change_with(a, b, eta, &tight_power())?;
        errors.push((oracle_sigma1(&a.plus_scaled(eta, b)?)? - predicted).abs());
    }
    let ratios = errors.windows(2).map(|e| e[0] / e[1]).collect();
    let n = errors.len();
    Ok(PerturbationReport {
        etas: etas.to_vec(),
        floored: errors[n - 1] < PERTURBATION_FLOOR || errors[n - 2] < PERTURBATION_FLOOR,
        errors,
        ratios,
        gap,
    })
}

/// Trains a small MLP on separable clusters until its batch loss is below
/// `target_loss` and returns `(loss, fraction of samples with negative logit
/// deviation)`.
pub fn trained_region_fraction(seed: u64, target_loss: f64) -> Result<(f64, f64)> {
    let spec = DatasetSpec {
        kind: DatasetKind::GaussianClusters,
        n_classes: 4,
        dim: 8,
        n_samples: 128,
        cluster_spread: 0.5,
        shift: 0.0,
        seed,
    };
    let data = spec.generate()?;
    let mut model = init_mlp(&[8, 32, 4], seed, 1.0)?;
    let xs: Vec<&[f64]> = data.inputs.iter().map(Vec::as_slice).collect();
    for _ in 0..20_000 {
        let pass = batch_pass(&model, &xs, &data.targets)?;
        if pass.loss < target_loss {
            let mut negative = 0usize;
            for ((t, p), &k) in pass.traces.iter().zip(&pass.probs).zip(&data.targets) {
                if logit_deviation(p, k, t.logits())?.value() < 0.0 {
                    negative += 1;
                }
            }
            return Ok((pass.loss, negative as f64 / data.len() as f64));
        }
        model.apply_gradients(&pass.grads, 0.2)?;
    }
    Err(Error::InvalidConfig(format!("loss did not reach {target_loss}")))
}

/// Random logits with `k = argmax z`; returns `(identity holds, deviation is
/// negative)` for one draw.
pub fn lemma_draw<R: Rng + ?Sized>(rng: &mut R) -> Result<(bool, bool)> {
    let classes = rng.random_range(2..=10);
    let scale: f64 = rng.random_range(0.1..10.0);
    let z: Vec<f64> = (0..classes)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut *rng);
            scale * g
        })
        .collect();
    let k = (0..classes).fold(0, |b, i| if z[i] > z[b] { i } else { b });
    let target = rng.random_range(0..classes);
    let (_, p) = softmax_cross_entropy(&z, k)?;
    let identity = logit_deviation(&p, target, &z).is_ok();
    let others_max = (0..classes).filter(|&i| i != k).map(|i| p[i]).fold(0.0, f64::max);
    let negative = p[k] <= others_max || logit_deviation(&p, k, &z)?.value() < 0.0;
    Ok((identity, negative))
}

/// The individual theory checks exposed through the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradient,
    Perturbation,
    Growth,
    Lemma,
    Amplification,
}

impl Suite {
    pub const ALL: [Suite; 5] =
        [Suite::Gradient, Suite::Perturbation, Suite::Growth, Suite::Lemma, Suite::Amplification];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradient => "gradient",
            Suite::Perturbation => "perturbation",
            Suite::Growth => "growth",
            Suite::Lemma => "lemma",
            Suite::Amplification => "amplification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn default_trials(self) -> usize {
        match self {
            Suite::Gradient => 20,
            Suite::Perturbation => 20,
            Suite::Growth => 50,
            Suite::Lemma => 1000,
            Suite::Amplification => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub passed: bool,
    /// Human-readable statistics, one line each.
    pub lines: Vec<String>,
    /// One line per violated invariant, naming the seed.
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: Suite, trials: usize) -> Self {
        Self { suite, trials, passed: true, lines: Vec::new(), failures: Vec::new() }
    }

    fn fail(&mut self, msg: String) {
        self.passed = false;
        self.failures.push(msg);
    }

    fn finish(mut self) -> Self {
        self.passed = self.failures.is_empty();
        self
    }
}

/// Relative tolerance of the finite-difference gradient check.
pub const FD_TOLERANCE: f64 = 1e-5;
/// Central-difference step relative to `max(1, |w|)`.
pub const FD_STEP: f64 = 1e-6;
/// Agreement between reverse accumulation and the literal product.
pub const PRODUCT_TOLERANCE: f64 = 1e-10;
/// Calibrated lower bound on the mean cosine between the mean-field and exact
/// gradients over random ReLU networks.
pub const APPROX_COSINE_FLOOR: f64 = 0.5;
/// Step size of the growth trials; the linearity check also uses a tenth of it.
pub const GROWTH_ETA: f64 = 1e-3;
/// Step size of the amplification run.
pub const AMPLIFICATION_ETA: f64 = 0.05;
/// Upper-layer scale of the amplification run; small upper weights keep the
/// output error large while the network is driven along `u₁`.
pub const AMPLIFICATION_UPPER_SCALE: f64 = 0.1;

/// Random MLP with 2 to 4 layers and widths up to `max_width`.
pub fn random_mlp<R: Rng + ?Sized>(rng: &mut R, max_width: usize) -> Result<MlpState> {
    let depth = rng.random_range(2..=4);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=max_width)).collect();
    init_mlp(&dims, rng.random(), 1.0)
}

fn random_input<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

/// Largest entrywise gap between reverse accumulation and the literal
/// product formula, relative to `max(1, max |g|)`.
pub fn product_formula_gap(model: &MlpState, x: &[f64], target: usize) -> Result<f64> {
    let trace = forward(model, x)?;
    let (_, p) = softmax_cross_entropy(trace.logits(), target)?;
    let exact = backward_exact(model, &trace, &p, target)?;
    let mut worst = 0.0f64;
    for (l, g) in exact.iter().enumerate() {
        let lit = product_formula_gradient(model, &trace, &p, target, l + 1)?;
        let scale = g.max_abs().max(1.0);
        for (a, b) in g.data().iter().zip(lit.data()) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    Ok(worst)
}

fn gradient_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Gradient, trials);
    let (mut worst_fd, mut worst_prod) = (0.0f64, 0.0f64);
    let mut cos_sum = 0.0;
    let mut cos_n = 0usize;
    for t in 0..trials {
        let s = seed.wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let model = random_mlp(&mut rng, 16)?;
        let x = random_input(&mut rng, model.input_dim());
        let target = rng.random_range(0..model.n_classes());

        let fd = finite_difference_check(&model, &x, target, FD_STEP)?;
        worst_fd = worst_fd.max(fd.max_rel_err);
        if fd.max_rel_err > FD_TOLERANCE {
            rep.fail(format!(
                "finite differences: seed {s}, rel. error {:.3e} at layer {} entry ({}, {})",
                fd.max_rel_err, fd.worst.0, fd.worst.1, fd.worst.2
            ));
        }
        let gap = product_formula_gap(&model, &x, target)?;
        worst_prod = worst_prod.max(gap);
        if gap > PRODUCT_TOLERANCE {
            rep.fail(format!("product formula: seed {s}, gap {gap:.3e}"));
        }

        let trace = forward(&model, &x)?;
        let (_, p) = softmax_cross_entropy(trace.logits(), target)?;
        let exact = backward_exact(&model, &trace, &p, target)?;
        for l in 1..model.depth() {
            let rho = estimate_rho(std::slice::from_ref(&trace), l)?;
            if !(0.0..=1.0).contains(&rho.rho) {
                rep.fail(format!("rho out of range: seed {s}, layer {l}, rho {}", rho.rho));
            }
            if exact[l - 1].is_zero() {
                continue;
            }
            let approx = approx_gradient(&model, &trace, &p, target, rho.rho, l)?;
            cos_sum += cosine_similarity(&approx, &exact[l - 1])?;
            cos_n += 1;
        }
    }
    rep.lines.push(format!("finite differences: worst rel. error {worst_fd:.3e} (tol {FD_TOLERANCE:e})"));
    rep.lines.push(format!("product formula: worst gap {worst_prod:.3e} (tol {PRODUCT_TOLERANCE:e})"));
    let cos_mean = if cos_n > 0 { cos_sum / cos_n as f64 } else { f64::NAN };
    rep.lines.push(format!(
        "mean-field approximation: mean cosine {cos_mean:.3} over {cos_n} layers (floor {APPROX_COSINE_FLOOR})"
    ));
    if cos_n > 0 && cos_mean < APPROX_COSINE_FLOOR {
        rep.fail(format!("mean-field cosine {cos_mean:.3} below {APPROX_COSINE_FLOOR}"));
    }
    Ok(rep.finish())
}

/// Random `n×n` pair with a simple top singular value.
pub fn random_perturbation_pair<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<(Matrix, Matrix)> {
    loop {
        let a = Matrix::random_normal(n, n, 1.0, rng);
        let b = Matrix::random_normal(n, n, 1.0, rng);
        let s = svd_small_oracle(&a)?;
        if s[0].sigma / s[1].sigma >= 1.05 {
            return Ok((a, b));
        }
    }
}

pub const PERTURBATION_ETAS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

fn perturbation_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Perturbation, trials);
    rep.lines.push(format!(
        "{:>6} {:>8} {:>11} {:>11} {:>11} {:>7}",
        "seed", "gap", "e(1e-2)", "e(5e-3)", "e(2.5e-3)", "ratio"
    ));
    for t in 0..trials {
        let s = seed.wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (a, b) = random_perturbation_pair(&mut rng, 6)?;
        let r = verify_perturbation_order(&a, &b, &PERTURBATION_ETAS)?;
        rep.lines.push(format!(
            "{:>6} {:>8.4} {:>11.3e} {:>11.3e} {:>11.3e} {:>7.3}",
            s,
            r.gap,
            r.errors[0],
            r.errors[1],
            r.errors[2],
            r.final_ratio()
        ));
        if !r.passes() {
            rep.fail(format!("error ratio {:.3} outside [3, 5] for seed {s}", r.final_ratio()));
        }
    }
    Ok(rep.finish())
}

fn growth_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Growth, trials);
    let (mut grew, mut agreed) = (0usize, 0usize);
    let (mut lin_min, mut lin_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut fac_min, mut fac_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..trials {
        let s = seed.wrapping_add(t as u64);
        let cfg = ForcedAlignmentConfig { seed: s, noise: 1e-3, ..Default::default() };
        let fa = ForcedAlignment::build(&cfg)?;
        let g = fa.growth(GROWTH_ETA)?;
        let g10 = fa.growth(GROWTH_ETA / 10.0)?;
        let lin = g.actual_delta / g10.actual_delta;
        let factor = g.predicted_delta / g.actual_delta;
        lin_min = lin_min.min(lin);
        lin_max = lin_max.max(lin);
        fac_min = fac_min.min(factor);
        fac_max = fac_max.max(factor);
        if g.actual_delta > 0.0 {
            grew += 1;
        } else {
            rep.fail(format!("seed {s}: actual change {:.3e} is not positive", g.actual_delta));
        }
        if g.sign_agrees {
            agreed += 1;
        } else {
            rep.fail(format!("seed {s}: predicted {:.3e} vs actual {:.3e}", g.predicted_delta, g.actual_delta));
        }
        if !(8.0..=12.0).contains(&lin) {
            rep.fail(format!("seed {s}: eta-linearity ratio {lin:.3} outside [8, 12]"));
        }
        if g.pathology_ratio > PATHOLOGY_LIMIT || g.logit_dev >= 0.0 {
            rep.fail(format!(
                "seed {s}: precondition violated (pathology {:.3}, logit deviation {:.3e})",
                g.pathology_ratio, g.logit_dev
            ));
        }
    }
    rep.lines.push(format!("positive growth: {grew}/{trials}"));
    rep.lines.push(format!("sign agreement: {agreed}/{trials}"));
    rep.lines.push(format!("eta-linearity ratio range: [{lin_min:.3}, {lin_max:.3}]"));
    rep.lines.push(format!("predicted/actual range: [{fac_min:.3}, {fac_max:.3}]"));
    Ok(rep.finish())
}

/// Training-loss target for the region part of the lemma suite.
pub const REGION_LOSS: f64 = 0.1;
/// Required share of trained samples with negative logit deviation.
pub const REGION_FRACTION: f64 = 0.95;

fn lemma_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new(Suite::Lemma, trials);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ident, mut neg) = (0usize, 0usize);
    for t in 0..trials {
        let (i, n) = lemma_draw(&mut rng)?;
        ident += i as usize;
        neg += n as usize;
        if !i {
            rep.fail(format!("identity violated on draw {t} (seed {seed})"));
        }
        if !n {
            rep.fail(format!("non-negative deviation at argmax target on draw {t} (seed {seed})"));
        }
    }
    rep.lines.push(format!("identity: {ident}/{trials} draws within 1e-10"));
    rep.lines.push(format!("argmax target gives negative deviation: {neg}/{trials}"));
    let (loss, frac) = trained_region_fraction(seed, REGION_LOSS)?;
    rep.lines.push(format!("trained MLP: loss {loss:.4}, {:.1}% of samples with negative deviation", 100.0 * frac));
    if frac < REGION_FRACTION {
        rep.fail(format!("only {:.1}% negative after training (seed {seed})", 100.0 * frac));
    }
    Ok(rep.finish())
}

fn amplification_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let steps = trials.max(5);
    let mut rep = SuiteReport::new(Suite::Amplification, steps);
    let cfg = ForcedAlignmentConfig { seed, upper_scale: AMPLIFICATION_UPPER_SCALE, ..Default::default() };
    let fa = ForcedAlignment::build(&cfg)?;
    let a = fa.amplification(AMPLIFICATION_ETA, steps)?;
    rep.lines.push(format!("sigma1: {}", series(&a.sigma1_series)));
    rep.lines.push(format!("preactivation norm: {}", series(&a.preact_norms)));
    rep.lines.push(format!("gradient Frobenius norm: {}", series(&a.grad_frob_series)));
    rep.lines.push(format!("ratio consistency: {:.3e}", a.ratio_consistency));
    if !a.sigma1_strictly_increasing() {
        rep.fail(format!("sigma1 not strictly increasing (seed {seed})"));
    }
    if a.ratio_consistency > 1e-6 {
        rep.fail(format!("|f|/(beta sigma1) deviates by {:.3e} (seed {seed})", a.ratio_consistency));
    }
    if !a.grad_non_decreasing() {
        rep.fail(format!("gradient norm decreased (seed {seed})"));
    }
    let frozen = fa.amplification(0.0, 5)?;
    if frozen.sigma1_series.windows(2).any(|w| w[0] != w[1]) {
        rep.fail("eta = 0 changed sigma1".into());
    }
    Ok(rep.finish())
}

fn series(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

/// Runs one suite with `trials` trials and base seed `seed`. Numeric errors
/// inside a suite are reported as failures rather than propagated.
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> SuiteReport {
    let out = match suite {
        Suite::Gradient => gradient_suite(trials, seed),
        Suite::Perturbation => perturbation_suite(trials, seed),
        Suite::Growth => growth_suite(trials, seed),
        Suite::Lemma => lemma_suite(trials, seed),
        Suite::Amplification => amplification_suite(trials, seed),
    };
    out.unwrap_or_else(|e| {
        let mut rep = SuiteReport::new(suite, trials);
        rep.fail(format!("aborted: {e}"));
        rep
    })
}
