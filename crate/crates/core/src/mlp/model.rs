use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Bias-free MLP `f⁽ˡ⁾ = h⁽ˡ⁻¹⁾ W_l`, ReLU on hidden layers, linear logits.
///
/// Layers are numbered from 1 as `W_1 … W_L`; `W_l` has shape
/// `dims[l-1] × dims[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpState {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
}

impl MlpState {
    pub fn from_weights(weights: Vec<Matrix>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::BadDims(format!("need at least 2 layers, got {}", weights.len())));
        }
        let mut dims = vec![weights[0].rows()];
        for (i, w) in weights.iter().enumerate() {
            if w.rows() != *dims.last().unwrap() {
                return Err(Error::BadDims(format!(
                    "W_{} has {} rows but the previous layer has width {}",
                    i + 1,
                    w.rows(),
                    dims.last().unwrap()
                )));
            }
            dims.push(w.cols());
        }
        Ok(Self { dims, weights })
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// `W_l`, 1-based.
    pub fn weight(&self, l: usize) -> &Matrix {
        &self.weights[l - 1]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.weights[l - 1]
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
    }

    /// `W_l ← W_l − η·g_l` for every layer.
    pub fn apply_gradients(&mut self, grads: &[Matrix], eta: f64) -> Result<()> {
        if grads.len() != self.weights.len() {
            return Err(Error::ShapeMismatch(format!("{} gradients for {} layers", grads.len(), self.weights.len())));
        }
        for (w, g) in self.weights.iter_mut().zip(grads) {
            w.add_scaled(-eta, g)?;
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 3 {
        return Err(Error::BadDims(format!("need at least one hidden layer (3 widths), got {dims:?}")));
    }
    if dims.contains(&0) {
        return Err(Error::BadDims(format!("widths must be positive, got {dims:?}")));
    }
    Ok(())
}

/// Gaussian initialization with `std = init_scale / sqrt(fan_in)`.
pub fn init_mlp(dims: &[usize], seed: u64, init_scale: f64) -> Result<MlpState> {
    check_dims(dims)?;
    if !(init_scale >= 0.0) || !init_scale.is_finite() {
        return Err(Error::InvalidConfig(format!("init_scale must be a nonnegative finite number, got {init_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = dims
        .windows(2)
        .map(|w| Matrix::random_normal(w[0], w[1], init_scale / (w[0] as f64).sqrt(), &mut rng))
        .collect();
    MlpState::from_weights(weights)
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `h⁽⁰⁾ … h⁽ᴸ⁾`; `h⁽⁰⁾` is the input and `h⁽ᴸ⁾` the logits.
    pub h: Vec<Vec<f64>>,
    /// `f⁽¹⁾ … f⁽ᴸ⁾`, stored at index `l - 1`.
    pub f: Vec<Vec<f64>>,
    /// `1(f⁽ˡ⁾ > 0)` for hidden layers `l = 1 … L−1`, stored at index `l - 1`.
    pub active_masks: Vec<Vec<bool>>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.f.len()
    }

    pub fn logits(&self) -> &[f64] {
        self.h.last().unwrap()
    }

    pub fn input(&self, l: usize) -> &[f64] {
        &self.h[l - 1]
    }

    pub fn preact(&self, l: usize) -> &[f64] {
        &self.f[l - 1]
    }

    /// Gate pattern of layer `l`; the linear output layer is all-active.
    pub fn mask(&self, l: usize) -> Vec<bool> {
        if l == self.depth() {
            vec![true; self.f[l - 1].len()]
        } else {
            self.active_masks[l - 1].clone()
        }
    }
}

pub fn forward(model: &MlpState, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != model.input_dim() {
        return Err(Error::ShapeMismatch(format!("input has length {}, model expects {}", x.len(), model.input_dim())));
    }
    let depth = model.depth();
    let mut h = Vec::with_capacity(depth + 1);
    let mut f = Vec::with_capacity(depth);
    let mut masks = Vec::with_capacity(depth - 1);
    h.push(x.to_vec());
    for l in 1..=depth {
        let pre = model.weight(l).tmul_vec(&h[l - 1]);
        if l < depth {
            masks.push(pre.iter().map(|&v| v > 0.0).collect());
            h.push(pre.iter().map(|&v| v.max(0.0)).collect());
        } else {
            h.push(pre.clone());
        }
        f.push(pre);
    }
    Ok(ForwardTrace { h, f, active_masks: masks })
}

/// Softmax cross-entropy `log Σ e^{z_j} − z_k` and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::BadTarget { target, classes: logits.len() });
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let zmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - zmax).exp()).collect();
    let total: f64 = exps.iter().sum();
    let p = exps.iter().map(|e| e / total).collect();
    let loss = zmax + total.ln() - logits[target];
    Ok((loss, p))
}

/// `p − t` for a one-hot target.
pub fn output_error(p: &[f64], target: usize) -> Vec<f64> {
    let mut g = p.to_vec();
    g[target] -= 1.0;
    g
}

/// Gradients `∂L/∂W_l` for one sample by reverse accumulation, returned in
/// layer order `W_1 … W_L`.
pub fn backward_exact(model: &MlpState, trace: &ForwardTrace, p: &[f64], target: usize) -> Result<Vec<Matrix>> {
    let depth = model.depth();
    if trace.depth() != depth
        || trace.h.len() != depth + 1
        || trace.active_masks.len() + 1 != depth
        || (1..=depth).any(|l| trace.f[l - 1].len() != model.dims()[l] || trace.h[l - 1].len() != model.dims()[l - 1])
    {
        return Err(Error::TraceMismatch(format!("trace shapes do not match model dims {:?}", model.dims())));
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

    let mut grads = Vec::with_capacity(depth);
    // ∂L/∂f⁽ᴸ⁾
    let mut delta = output_error(p, target);
    for l in (1..=depth).rev() {
        grads.push(Matrix::outer(trace.input(l), &delta));
        if l > 1 {
            let back = model.weight(l).mul_vec(&delta);
            delta = back.iter().zip(&trace.active_masks[l - 2]).map(|(&d, &on)| if on { d } else { 0.0 }).collect();
        }
    }
    grads.reverse();
    Ok(grads)
}

/// Per-sample loss without keeping the trace.
pub fn sample_loss(model: &MlpState, x: &[f64], target: usize) -> Result<f64> {
    let trace = forward(model, x)?;
    Ok(softmax_cross_entropy(trace.logits(), target)?.0)
}

/// Mean loss and mean gradient over a batch, plus each sample's trace and
/// probabilities.
#[derive(Debug, Clone)]
pub struct BatchPass {
    pub loss: f64,
    pub grads: Vec<Matrix>,
    pub traces: Vec<ForwardTrace>,
    pub probs: Vec<Vec<f64>>,
}

pub fn batch_pass(model: &MlpState, xs: &[&[f64]], targets: &[usize]) -> Result<BatchPass> {
    if xs.is_empty() || xs.len() != targets.len() {
        return Err(Error::BadInput(format!("{} inputs and {} targets", xs.len(), targets.len())));
    }
    let n = xs.len() as f64;
    let mut grads: Vec<Matrix> = model.weights().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    let mut loss = 0.0;
    let mut traces = Vec::with_capacity(xs.len());
    let mut probs = Vec::with_capacity(xs.len());
    for (x, &t) in xs.iter().zip(targets) {
        let trace = forward(model, x)?;
        let (l, p) = softmax_cross_entropy(trace.logits(), t)?;
        let g = backward_exact(model, &trace, &p, t)?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_scaled(1.0 / n, gi)?;
        }
        loss += l / n;
        traces.push(trace);
        probs.push(p);
    }
    Ok(BatchPass { loss, grads, traces, probs })
}
