use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm2, normalize, random_unit_vector, Matrix};
use crate::error::{Error, Result};

/// Seed of the default starting vector.
pub const DEFAULT_INIT_SEED: u64 = 0x5A;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    /// Relative residual tolerance: stop once `‖Wᵀu − σv‖ ≤ tol·σ`.
    pub tol: f64,
    pub max_iters: usize,
    /// Starting left vector (length = rows). `None` draws one from
    /// [`DEFAULT_INIT_SEED`].
    pub init: Option<Vec<f64>>,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 1000, init: None }
    }
}

impl PowerConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_init(mut self, init: Vec<f64>) -> Self {
        self.init = Some(init);
        self
    }
}

/// Top singular value with its singular vectors, as produced by
/// [`power_iteration`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTriple {
    pub sigma1: f64,
    pub u1: Vec<f64>,
    pub v1: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖Wᵀu₁ − σ₁v₁‖₂` at exit.
    pub residual: f64,
}

impl SpectralTriple {
    /// Flips `(u1, v1)` jointly so that `u1` has a nonnegative inner product
    /// with `reference`, or, without a reference, so that the largest
    /// magnitude entry of `u1` is positive.
    pub fn canonicalize(&mut self, reference: Option<&[f64]>) {
        if sign_flip_needed(&self.u1, reference) {
            self.u1.iter_mut().for_each(|x| *x = -*x);
            self.v1.iter_mut().for_each(|x| *x = -*x);
        }
    }

    pub fn canonicalized(mut self, reference: Option<&[f64]>) -> Self {
        self.canonicalize(reference);
        self
    }
}

fn sign_flip_needed(u: &[f64], reference: Option<&[f64]>) -> bool {
    match reference {
        Some(r) => dot(u, r) < 0.0,
        None => {
            let mut best = 0;
            for (i, x) in u.iter().enumerate() {
                if x.abs() > u[best].abs() {
                    best = i;
                }
            }
            u.get(best).is_some_and(|&x| x < 0.0)
        }
    }
}

/// Fixes the free sign of a singular vector.
///
/// With a reference the result has a nonnegative inner product with it;
/// otherwise the element of largest magnitude (lowest index on ties) is made
/// positive.
pub fn canonicalize_sign(u1: &[f64], reference: Option<&[f64]>) -> Vec<f64> {
    if sign_flip_needed(u1, reference) {
        u1.iter().map(|x| -x).collect()
    } else {
        u1.to_vec()
    }
}

/// Alternating power iteration `v ← Wᵀu/‖·‖, u ← Wv/‖·‖`.
///
/// Never fails for lack of convergence: a stalled run (degenerate top
/// singular value, tiny gap) comes back with `converged = false` and the last
/// residual. The result is sign-canonicalized without a reference.
pub fn power_iteration(w: &Matrix, cfg: &PowerConfig) -> Result<SpectralTriple> {
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tol must be positive, got {}", cfg.tol)));
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
    }
    if w.is_zero() {
        return Err(Error::ZeroMatrix);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_INIT_SEED);
    let mut u = match &cfg.init {
        Some(init) => {
            if init.len() != w.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "init vector has length {}, matrix has {} rows",
                    init.len(),
                    w.rows()
                )));
            }
            let mut u = init.clone();
            if normalize(&mut u) == 0.0 {
                return Err(Error::ZeroInput);
            }
            u
        }
        None => random_unit_vector(w.rows(), &mut rng),
    };

    let mut v = vec![0.0; w.cols()];
    let mut sigma = 0.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        iterations += 1;
        v = w.tmul_vec(&u);
        if normalize(&mut v) == 0.0 {
            // start vector orthogonal to the row space; redraw
            u = random_unit_vector(w.rows(), &mut rng);
            continue;
        }
        u = w.mul_vec(&v);
        sigma = normalize(&mut u);
        let wtu = w.tmul_vec(&u);
        residual = norm2(&wtu.iter().zip(&v).map(|(a, b)| a - sigma * b).collect::<Vec<_>>());
        if residual <= cfg.tol * sigma {
            converged = true;
            break;
        }
    }

    let mut triple = SpectralTriple { sigma1: sigma, u1: u, v1: v, iterations, converged, residual };
    triple.canonicalize(None);
    Ok(triple)
}

/// Power iteration with [`PowerConfig::default`].
pub fn top_singular(w: &Matrix) -> Result<SpectralTriple> {
    power_iteration(w, &PowerConfig::default())
}

/// `‖W‖_F² / σ₁²`.
pub fn stable_rank(w: &Matrix, spec: &SpectralTriple) -> Result<f64> {
    if !(spec.sigma1 > 0.0) {
        return Err(Error::ZeroMatrix);
    }
    Ok(w.frobenius_norm_sq() / (spec.sigma1 * spec.sigma1))
}

/// First-order prediction of `‖A + ηB‖₂`: `σ₁(A) + η·u₁ᵀBv₁`.
pub fn first_order_spectral_change(a: &Matrix, b: &Matrix, eta: f64) -> Result<f64> {
    first_order_spectral_change_with(a, b, eta, &PowerConfig::default())
}

pub fn first_order_spectral_change_with(a: &Matrix, b: &Matrix, eta: f64, cfg: &PowerConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("perturbation is {:?}, matrix is {:?}", b.shape(), a.shape())));
    }
    let t = power_iteration(a, cfg)?;
    Ok(t.sigma1 + eta * b.bilinear(&t.u1, &t.v1))
}
