//! Spectral alignment: the cosine between a layer input `h` and the principal
//! left singular vector `u₁` of the layer's weight matrix.
//!
//! A single SA value says little. The signal is the distribution over a batch:
//! a healthy layer spreads its inputs on both sides of zero, while an
//! impending loss explosion shows up as the batch collapsing onto one sign.
//! [`detect_collapse`] turns a series of batch distributions into a verdict.
//!
//! Raw spectral norms are a poor substitute: in one reported transformer run
//! a key projection sat at `σ₁ ≈ 7.5` and trained fine, while an FFN gate
//! projection diverged from around `σ₁ ≈ 2.5`. The absolute level depends on
//! the layer, which is why [`BaselineMetrics`] are logged for comparison but
//! not used to raise the alarm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, power_iteration, stable_rank, Matrix, PowerConfig, SpectralTriple};

/// SA values with `|SA| ≤` this count as neither positive nor negative.
pub const DEFAULT_ZERO_BAND: f64 = 1e-9;

/// One batch of layer inputs, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    n_samples: usize,
    n_features: usize,
    data: Vec<f64>,
    pub step: u64,
}

impl ActivationBatch {
    pub fn new(n_samples: usize, n_features: usize, data: Vec<f64>, step: u64) -> Result<Self> {
        if n_samples == 0 || n_features == 0 {
            return Err(Error::ShapeMismatch(format!(
                "activation batch must be non-empty, got {n_samples}x{n_features}"
            )));
        }
        if data.len() != n_samples * n_features {
            return Err(Error::ShapeMismatch(format!(
                "{n_samples}x{n_features} batch needs {} values, got {}",
                n_samples * n_features,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "activation ({}, {}) is {}",
                pos / n_features,
                pos % n_features,
                data[pos]
            )));
        }
        Ok(Self { n_samples, n_features, data, step })
    }

    pub fn from_rows(rows: &[Vec<f64>], step: u64) -> Result<Self> {
        let m = Matrix::from_rows(rows)?;
        Ok(Self::from_matrix(m, step))
    }

    pub fn from_matrix(m: Matrix, step: u64) -> Self {
        let (n_samples, n_features) = m.shape();
        Self { n_samples, n_features, data: m.into_data(), step }
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_features)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `⟨h, u₁⟩ / ‖h‖₂` for a unit `u1`.
pub fn spectral_alignment(h: &[f64], u1: &[f64]) -> Result<f64> {
    if h.len() != u1.len() {
        return Err(Error::ShapeMismatch(format!("input has {} features, singular vector has {}", h.len(), u1.len())));
    }
    let hn = norm2(h);
    if hn == 0.0 {
        return Err(Error::ZeroInput);
    }
    Ok((dot(h, u1) / hn).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

impl Quantiles {
    /// Linear interpolation between order statistics. `sorted` must be
    /// ascending and non-empty.
    pub fn of_sorted(sorted: &[f64]) -> Self {
        Self {
            q05: quantile_sorted(sorted, 0.05),
            q25: quantile_sorted(sorted, 0.25),
            q50: quantile_sorted(sorted, 0.50),
            q75: quantile_sorted(sorted, 0.75),
            q95: quantile_sorted(sorted, 0.95),
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.q05, self.q25, self.q50, self.q75, self.q95]
    }
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// SA values of one batch plus summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SaDistribution {
    pub step: u64,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub frac_positive: f64,
    pub frac_negative: f64,
    pub n_skipped: usize,
    pub quantiles: Quantiles,
}

impl SaDistribution {
    pub fn from_values(step: u64, values: Vec<f64>, n_skipped: usize, zero_band: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let pos = values.iter().filter(|&&v| v > zero_band).count();
        let neg = values.iter().filter(|&&v| v < -zero_band).count();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            step,
            mean,
            std,
            frac_positive: pos as f64 / n,
            frac_negative: neg as f64 / n,
            n_skipped,
            quantiles: Quantiles::of_sorted(&sorted),
            values,
        })
    }

    pub fn frac_zero(&self) -> f64 {
        1.0 - self.frac_positive - self.frac_negative
    }
}

/// SA distribution of a batch against the (already sign-canonicalized)
/// principal left singular vector in `spec`.
pub fn sa_distribution(batch: &ActivationBatch, spec: &SpectralTriple) -> Result<SaDistribution> {
    sa_distribution_with(batch, &spec.u1, DEFAULT_ZERO_BAND)
}

pub fn sa_distribution_with(batch: &ActivationBatch, u1: &[f64], zero_band: f64) -> Result<SaDistribution> {
    if batch.n_features() != u1.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features, weight has {} rows",
            batch.n_features(),
            u1.len()
        )));
    }
    let mut values = Vec::with_capacity(batch.n_samples());
    let mut skipped = 0;
    for row in batch.rows() {
        match spectral_alignment(row, u1) {
            Ok(v) => values.push(v),
            Err(Error::ZeroInput) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    SaDistribution::from_values(batch.step, values, skipped, zero_band)
}

/// Orthogonal decomposition `u₁ = α h + ε` with `ε ⊥ h`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentDecomposition {
    pub alpha: f64,
    pub residual: Vec<f64>,
    pub eps_norm: f64,
    /// `‖ε‖ / (|α|·‖h‖)`; small means pathological alignment, `+∞` when `α = 0`.
    pub pathology_ratio: f64,
}

pub fn alignment_decomposition(h: &[f64], u1: &[f64]) -> Result<AlignmentDecomposition> {
    if h.len() != u1.len() {
        return Err(Error::ShapeMismatch(format!("input has {} features, singular vector has {}", h.len(), u1.len())));
    }
    let hn = norm2(h);
    if hn == 0.0 {
        return Err(Error::ZeroInput);
    }
    let alpha = dot(u1, h) / (hn * hn);
    let residual: Vec<f64> = u1.iter().zip(h).map(|(u, x)| u - alpha * x).collect();
    let eps_norm = norm2(&residual);
    let pathology_ratio = if alpha == 0.0 { f64::INFINITY } else { eps_norm / (alpha.abs() * hn) };
    Ok(AlignmentDecomposition { alpha, residual, eps_norm, pathology_ratio })
}

/// Median pathology ratio over the nonzero rows of a batch.
pub fn pathology_median(batch: &ActivationBatch, u1: &[f64]) -> Result<f64> {
    let mut ratios = Vec::with_capacity(batch.n_samples());
    for row in batch.rows() {
        match alignment_decomposition(row, u1) {
            Ok(d) => ratios.push(d.pathology_ratio),
            Err(Error::ZeroInput) => {}
            Err(e) => return Err(e),
        }
    }
    if ratios.is_empty() {
        return Err(Error::EmptyBatch);
    }
    ratios.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&ratios, 0.5))
}

/// The conventional stability indicators SA is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub weight_sigma1: f64,
    pub grad_sigma1: Option<f64>,
    pub stable_rank: f64,
    pub max_activation: f64,
}

pub fn baseline_metrics(w: &Matrix, grad: Option<&Matrix>, batch: &ActivationBatch) -> Result<BaselineMetrics> {
    let cfg = PowerConfig::default();
    let spec = power_iteration(w, &cfg)?;
    baseline_metrics_with(w, &spec, grad, batch, &cfg)
}

/// Same as [`baseline_metrics`] but reuses an existing weight triple.
///
/// A gradient that is exactly zero has spectral norm zero and is reported as
/// such instead of failing.
pub fn baseline_metrics_with(
    w: &Matrix,
    spec: &SpectralTriple,
    grad: Option<&Matrix>,
    batch: &ActivationBatch,
    cfg: &PowerConfig,
) -> Result<BaselineMetrics> {
    if batch.n_features() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features, weight has {} rows",
            batch.n_features(),
            w.rows()
        )));
    }
    let grad_sigma1 = match grad {
        None => None,
        Some(g) if g.shape() != w.shape() => {
            return Err(Error::ShapeMismatch(format!("gradient is {:?}, weight is {:?}", g.shape(), w.shape())))
        }
        Some(g) if g.is_zero() => Some(0.0),
        Some(g) => {
            let grad_cfg = PowerConfig { init: None, ..cfg.clone() };
            Some(power_iteration(g, &grad_cfg)?.sigma1)
        }
    };
    Ok(BaselineMetrics {
        weight_sigma1: spec.sigma1,
        grad_sigma1,
        stable_rank: stable_rank(w, spec)?,
        max_activation: batch.max_abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseConfig {
    /// Minimum share of the dominant sign, in `(0.5, 1]`.
    pub sign_frac_threshold: f64,
    pub mean_abs_threshold: f64,
    /// Number of most recent checks inspected for a warning.
    pub window: usize,
    /// Consecutive qualifying checks needed to declare a collapse.
    pub consecutive_required: usize,
    pub zero_band: f64,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            sign_frac_threshold: 0.9,
            mean_abs_threshold: 0.15,
            window: 10,
            consecutive_required: 3,
            zero_band: DEFAULT_ZERO_BAND,
        }
    }
}

impl CollapseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sign_frac_threshold > 0.5 && self.sign_frac_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sign_frac_threshold must lie in (0.5, 1], got {}",
                self.sign_frac_threshold
            )));
        }
        if !(self.mean_abs_threshold >= 0.0) || !(self.zero_band >= 0.0) {
            return Err(Error::InvalidConfig("mean_abs_threshold and zero_band must be nonnegative".into()));
        }
        if self.consecutive_required == 0 || self.window < self.consecutive_required {
            return Err(Error::InvalidConfig(format!(
                "need window >= consecutive_required >= 1, got window {} and consecutive_required {}",
                self.window, self.consecutive_required
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityStatus {
    Healthy,
    Warning,
    Collapsed,
}

impl DiversityStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Healthy => "healthy",
            Self::Warning => "warning",
            Self::Collapsed => "collapsed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityVerdict {
    pub status: DiversityStatus,
    pub onset_step: Option<u64>,
    pub dominant_sign: Option<Sign>,
}

impl DiversityVerdict {
    pub fn healthy() -> Self {
        Self { status: DiversityStatus::Healthy, onset_step: None, dominant_sign: None }
    }
}

/// The part of a batch distribution the collapse rule looks at. Implemented by
/// [`SaDistribution`] and by logged metric records, so verdicts can be
/// recomputed from a metric log alone.
pub trait SignSummary {
    fn step(&self) -> u64;
    fn mean(&self) -> f64;
    fn frac_positive(&self) -> f64;
    fn frac_negative(&self) -> f64;
}

impl SignSummary for SaDistribution {
    fn step(&self) -> u64 {
        self.step
    }
    fn mean(&self) -> f64 {
        self.mean
    }
    fn frac_positive(&self) -> f64 {
        self.frac_positive
    }
    fn frac_negative(&self) -> f64 {
        self.frac_negative
    }
}

fn qualifies<S: SignSummary>(d: &S, cfg: &CollapseConfig) -> bool {
    d.frac_positive().max(d.frac_negative()) >= cfg.sign_frac_threshold && d.mean().abs() >= cfg.mean_abs_threshold
}

fn dominant<S: SignSummary>(d: &S) -> Sign {
    if d.frac_negative() > d.frac_positive() {
        Sign::Negative
    } else {
        Sign::Positive
    }
}

/// Classifies a step-ordered series of SA distributions.
///
/// A check qualifies when one sign holds at least `sign_frac_threshold` of the
/// batch and `|mean| ≥ mean_abs_threshold`. `consecutive_required` qualifying
/// checks in a row anywhere in the series mean `Collapsed`, with the onset at
/// the first step of the earliest such streak. Otherwise any qualifying check
/// among the last `window` checks means `Warning`.
pub fn detect_collapse<S: SignSummary>(series: &[S], cfg: &CollapseConfig) -> Result<DiversityVerdict> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if let Some(w) = series.windows(2).find(|w| w[1].step() < w[0].step()) {
        return Err(Error::BadInput(format!("series not sorted by step: {} follows {}", w[1].step(), w[0].step())));
    }

    let flags: Vec<bool> = series.iter().map(|d| qualifies(d, cfg)).collect();
    let mut run_start = 0;
    for (i, &q) in flags.iter().enumerate() {
        if !q {
            run_start = i + 1;
            continue;
        }
        if i + 1 - run_start >= cfg.consecutive_required {
            let onset = &series[run_start];
            return Ok(DiversityVerdict {
                status: DiversityStatus::Collapsed,
                onset_step: Some(onset.step()),
                dominant_sign: Some(dominant(onset)),
            });
        }
    }

    let tail = series.len().saturating_sub(cfg.window);
    if let Some(i) = (tail..series.len()).find(|&i| flags[i]) {
        return Ok(DiversityVerdict {
            status: DiversityStatus::Warning,
            onset_step: Some(series[i].step()),
            dominant_sign: Some(dominant(&series[i])),
        });
    }
    Ok(DiversityVerdict::healthy())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::linalg::{random_unit_vector, top_singular};

    const U: [f64; 3] = [0.6, 0.0, 0.8];

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn alignment_examples() {
        let h: Vec<f64> = U.iter().map(|x| 5.0 * x).collect();
        assert!(close(spectral_alignment(&h, &U).unwrap(), 1.0, 1e-15));
        assert_eq!(spectral_alignment(&[0.0, 2.0, 0.0], &U).unwrap(), 0.0);
        let h: Vec<f64> = U.iter().map(|x| -2.0 * x).collect();
        assert!(close(spectral_alignment(&h, &U).unwrap(), -1.0, 1e-15));
        assert!(matches!(spectral_alignment(&[0.0; 3], &U), Err(Error::ZeroInput)));
        assert!(spectral_alignment(&[1.0; 2], &U).is_err());
    }

    #[test]
    fn distribution_examples() {
        let rows: Vec<Vec<f64>> = (0..4).map(|_| U.to_vec()).collect();
        let d = sa_distribution_with(&ActivationBatch::from_rows(&rows, 3).unwrap(), &U, DEFAULT_ZERO_BAND).unwrap();
        assert_eq!(d.step, 3);
        assert!(d.values.iter().all(|&v| close(v, 1.0, 1e-15)));
        assert!(close(d.mean, 1.0, 1e-15));
        assert_eq!(d.frac_positive, 1.0);

        let neg: Vec<f64> = U.iter().map(|x| -x).collect();
        let d =
            sa_distribution_with(&ActivationBatch::from_rows(&[U.to_vec(), neg], 0).unwrap(), &U, DEFAULT_ZERO_BAND)
                .unwrap();
        assert!(close(d.mean, 0.0, 1e-15));
        assert_eq!(d.frac_positive, 0.5);
        assert_eq!(d.frac_negative, 0.5);
        assert_eq!(d.frac_zero(), 0.0);
    }

    #[test]
    fn zero_rows_are_skipped_and_counted() {
        let batch = ActivationBatch::from_rows(&[vec![0.0; 3], U.to_vec(), vec![0.0, 1.0, 0.0]], 0).unwrap();
        let d = sa_distribution_with(&batch, &U, DEFAULT_ZERO_BAND).unwrap();
        assert_eq!(d.n_skipped, 1);
        assert_eq!(d.values.len(), 2);
        assert_eq!(d.frac_zero(), 0.5);

        let zeros = ActivationBatch::from_rows(&[vec![0.0; 3], vec![0.0; 3]], 0).unwrap();
        assert!(matches!(sa_distribution_with(&zeros, &U, DEFAULT_ZERO_BAND), Err(Error::EmptyBatch)));
    }

    #[test]
    fn isotropic_batch_is_balanced() {
        // 256 isotropic directions in 64 dims: the SA of each is a cosine with
        // standard deviation 1/8, so the batch mean has standard deviation
        // 1/128 and the positive share 1/32. The bounds below sit at 6.4 and
        // 3.2 standard deviations.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let u1 = random_unit_vector(64, &mut rng);
        let rows: Vec<Vec<f64>> = (0..256).map(|_| random_unit_vector(64, &mut rng)).collect();
        let d = sa_distribution_with(&ActivationBatch::from_rows(&rows, 0).unwrap(), &u1, DEFAULT_ZERO_BAND).unwrap();
        assert!(d.mean.abs() <= 0.05, "mean {}", d.mean);
        assert!((0.4..=0.6).contains(&d.frac_positive), "frac {}", d.frac_positive);
    }

    #[test]
    fn quantiles_interpolate() {
        let q = Quantiles::of_sorted(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(q.as_array(), [0.2, 1.0, 2.0, 3.0, 3.8]);
        let single = Quantiles::of_sorted(&[0.5]);
        assert_eq!(single.as_array(), [0.5; 5]);
    }

    #[test]
    fn decomposition_examples() {
        let d = alignment_decomposition(&U, &U).unwrap();
        assert!(close(d.alpha, 1.0, 1e-15));
        assert!(d.eps_norm < 1e-15);
        assert!(d.pathology_ratio < 1e-15);

        let d = alignment_decomposition(&[0.0, 3.0, 0.0], &U).unwrap();
        assert_eq!(d.alpha, 0.0);
        assert!(close(d.eps_norm, 1.0, 1e-15));
        assert_eq!(d.pathology_ratio, f64::INFINITY);

        assert!(matches!(alignment_decomposition(&[0.0; 3], &U), Err(Error::ZeroInput)));
    }

    #[test]
    fn pathology_ratio_closed_form() {
        // with unit u1: |alpha|·‖h‖ = |SA| and ‖ε‖ = sqrt(1 − SA²)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let u1 = random_unit_vector(7, &mut rng);
            let h: Vec<f64> = random_unit_vector(7, &mut rng).iter().map(|x| 3.0 * x).collect();
            let s = spectral_alignment(&h, &u1).unwrap();
            let d = alignment_decomposition(&h, &u1).unwrap();
            let expected = (1.0 - s * s).sqrt() / s.abs();
            assert!((d.pathology_ratio - expected).abs() <= 1e-9 * expected.max(1.0));
        }
    }

    #[test]
    fn baseline_hand_values() {
        let w = Matrix::from_diag(&[3.0, 1.0]);
        let batch = ActivationBatch::from_rows(&[vec![1.0, -4.0]], 0).unwrap();
        let b = baseline_metrics(&w, None, &batch).unwrap();
        assert!(close(b.weight_sigma1, 3.0, 1e-12));
        assert_eq!(b.grad_sigma1, None);
        assert!(close(b.stable_rank, 10.0 / 9.0, 1e-12));
        assert_eq!(b.max_activation, 4.0);

        let g = Matrix::from_diag(&[0.0, -2.0]);
        let b = baseline_metrics(&w, Some(&g), &batch).unwrap();
        assert!(close(b.grad_sigma1.unwrap(), 2.0, 1e-12));
        let b = baseline_metrics(&w, Some(&Matrix::zeros(2, 2)), &batch).unwrap();
        assert_eq!(b.grad_sigma1, Some(0.0));

        assert!(matches!(baseline_metrics(&Matrix::zeros(2, 2), None, &batch), Err(Error::ZeroMatrix)));
        assert!(baseline_metrics(&w, Some(&Matrix::zeros(2, 3)), &batch).is_err());
    }

    #[test]
    fn baseline_uses_precomputed_triple() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![0.0, 3.0]]).unwrap();
        let spec = top_singular(&w).unwrap();
        let batch = ActivationBatch::from_rows(&[vec![1.0, 0.0, 2.0]], 0).unwrap();
        let a = baseline_metrics(&w, None, &batch).unwrap();
        let b = baseline_metrics_with(&w, &spec, None, &batch, &PowerConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    struct Point {
        step: u64,
        mean: f64,
        pos: f64,
        neg: f64,
    }

    impl SignSummary for Point {
        fn step(&self) -> u64 {
            self.step
        }
        fn mean(&self) -> f64 {
            self.mean
        }
        fn frac_positive(&self) -> f64 {
            self.pos
        }
        fn frac_negative(&self) -> f64 {
            self.neg
        }
    }

    fn balanced(step: u64) -> Point {
        Point { step, mean: if step % 2 == 0 { 0.02 } else { -0.02 }, pos: 0.5, neg: 0.5 }
    }

    fn collapsed(step: u64) -> Point {
        Point { step, mean: -0.3, pos: 0.03, neg: 0.97 }
    }

    fn cfg() -> CollapseConfig {
        CollapseConfig::default()
    }

    #[test]
    fn balanced_series_is_healthy() {
        let series: Vec<Point> = (0..20).map(balanced).collect();
        assert_eq!(detect_collapse(&series, &cfg()).unwrap(), DiversityVerdict::healthy());
    }

    #[test]
    fn injected_collapse_is_detected_at_onset() {
        let mut series: Vec<Point> = (0..10).map(balanced).collect();
        series.extend((10..15).map(collapsed));
        let v = detect_collapse(&series, &cfg()).unwrap();
        assert_eq!(v.status, DiversityStatus::Collapsed);
        assert_eq!(v.onset_step, Some(10));
        assert_eq!(v.dominant_sign, Some(Sign::Negative));
    }

    #[test]
    fn short_streak_is_a_warning() {
        let mut series: Vec<Point> = (0..10).map(balanced).collect();
        series.extend((10..12).map(collapsed));
        let v = detect_collapse(&series, &cfg()).unwrap();
        assert_eq!(v.status, DiversityStatus::Warning);
        assert_eq!(v.onset_step, Some(10));

        // a blip that has left the window no longer warns
        series.extend((12..30).map(balanced));
        assert_eq!(detect_collapse(&series, &cfg()).unwrap().status, DiversityStatus::Healthy);
    }

    #[test]
    fn both_conditions_are_required() {
        // one-sided but with a tiny mean
        let series: Vec<Point> = (0..5).map(|s| Point { step: s, mean: 0.05, pos: 1.0, neg: 0.0 }).collect();
        assert_eq!(detect_collapse(&series, &cfg()).unwrap().status, DiversityStatus::Healthy);
    }

    #[test]
    fn collapse_errors() {
        let empty: Vec<Point> = vec![];
        assert!(matches!(detect_collapse(&empty, &cfg()), Err(Error::EmptySeries)));
        let unsorted = vec![balanced(3), balanced(1)];
        assert!(matches!(detect_collapse(&unsorted, &cfg()), Err(Error::BadInput(_))));
        let bad = CollapseConfig { window: 2, ..cfg() };
        assert!(matches!(detect_collapse(&[balanced(0)], &bad), Err(Error::InvalidConfig(_))));
        let bad = CollapseConfig { sign_frac_threshold: 0.5, ..cfg() };
        assert!(bad.validate().is_err());
    }
}
