use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianClusters,
}

/// One isotropic Gaussian cluster per class.
///
/// Centers are standard normal vectors recentered to mean zero; every sample is `shift + center +
/// cluster_spread · noise`, where `shift` is a common vector of norm `shift`
/// shared by all classes (0 keeps the data centered in expectation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_classes: usize,
    pub dim: usize,
    pub n_samples: usize,
    pub cluster_spread: f64,
    pub shift: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.dim == 0 || self.n_samples == 0 {
            return Err(Error::InvalidConfig("dataset dim and n_samples must be positive".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::InvalidConfig(format!("cluster_spread must be positive, got {}", self.cluster_spread)));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return Err(Error::InvalidConfig(format!("shift must be nonnegative, got {}", self.shift)));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };

        let mut shift = gauss(self.dim);
        let norm = crate::linalg::normalize(&mut shift);
        if norm == 0.0 {
            shift.iter_mut().for_each(|x| *x = 0.0);
        }
        shift.iter_mut().for_each(|x| *x *= self.shift);

        let mut centers: Vec<Vec<f64>> = (0..self.n_classes).map(|_| gauss(self.dim)).collect();
        for j in 0..self.dim {
            let m = centers.iter().map(|c| c[j]).sum::<f64>() / self.n_classes as f64;
            centers.iter_mut().for_each(|c| c[j] -= m);
        }
        let mut inputs = Vec::with_capacity(self.n_samples);
        let mut targets = Vec::with_capacity(self.n_samples);
        for i in 0..self.n_samples {
            let k = i % self.n_classes;
            let noise = gauss(self.dim);
            let x = (0..self.dim).map(|j| shift[j] + centers[k][j] + self.cluster_spread * noise[j]).collect();
            inputs.push(x);
            targets.push(k);
        }
        Ok(Dataset { inputs, targets })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_refs(&self, idx: &[usize]) -> Vec<&[f64]> {
        idx.iter().map(|&i| self.inputs[i].as_slice()).collect()
    }

    pub fn target_subset(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.targets[i]).collect()
    }
}
