//! Full SVD of small dense matrices by one-sided (Hestenes) Jacobi.
//!
//! Each rotation orthogonalizes a pair of columns, which is the cyclic Jacobi
//! eigen-iteration on the Gram matrix `AᵀA` carried out without forming it.
//! Working on the columns directly keeps small singular values accurate.
//!
//! This is a test oracle for the power iteration path and the perturbation
//! checks, not a production decomposition: the smaller dimension is capped at
//! [`ORACLE_MAX_DIM`].

use super::matrix::{dot, norm2, Matrix};
use super::power::canonicalize_sign;
use crate::error::{Error, Result};

pub const ORACLE_MAX_DIM: usize = 64;

const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriple {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// All `min(rows, cols)` singular triples of `w`, sorted by descending
/// singular value, each sign-canonicalized on `u`.
pub fn svd_small_oracle(w: &Matrix) -> Result<Vec<SingularTriple>> {
    let min_dim = w.rows().min(w.cols());
    if min_dim > ORACLE_MAX_DIM {
        return Err(Error::TooLarge { min_dim, cap: ORACLE_MAX_DIM });
    }
    let transposed = w.rows() < w.cols();
    let a = if transposed { w.transpose() } else { w.clone() };
    let (m, n) = a.shape();

    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols.iter().map(|c| norm2(c)).zip(0..n).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let sigma_max = order.first().map_or(0.0, |o| o.0);
    let cutoff = sigma_max * f64::EPSILON * (m as f64);

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut triples = Vec::with_capacity(n);
    for &(sigma, j) in &order {
        let (sigma, u) = if sigma > cutoff && sigma > 0.0 {
            (sigma, cols[j].iter().map(|x| x / sigma).collect())
        } else {
            (0.0, complete_basis(&left, m))
        };
        left.push(u.clone());
        triples.push((sigma, u, vcols[j].clone()));
    }

    Ok(triples
        .into_iter()
        .map(|(sigma, u, v)| {
            let (u, v) = if transposed { (v, u) } else { (u, v) };
            let cu = canonicalize_sign(&u, None);
            let v = if cu != u { v.iter().map(|x| -x).collect() } else { v };
            SingularTriple { sigma, u: cu, v }
        })
        .collect())
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (xp, xq) = (&mut lo[p], &mut hi[0]);
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// A unit vector orthogonal to every vector in `basis`, built by two passes
/// of Gram-Schmidt over the standard basis.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let c = dot(&e, b);
                e.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = norm2(&e);
        if n > best_norm {
            best_norm = n;
            best = Some(e);
        }
        if n > 0.5 {
            break;
        }
    }
    let mut e = best.expect("basis cannot span the whole space");
    e.iter_mut().for_each(|x| *x /= best_norm);
    e
}

/// Reassembles `Σ σᵢ uᵢ vᵢᵀ`.
pub fn reconstruct(triples: &[SingularTriple], rows: usize, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    for t in triples {
        out.add_scaled(t.sigma, &Matrix::outer(&t.u, &t.v)).expect("triple shapes match");
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gram_defect(vectors: &[&[f64]]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in vectors.iter().enumerate() {
            for (j, b) in vectors.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }

    fn check_decomposition(w: &Matrix) {
        let t = svd_small_oracle(w).unwrap();
        assert_eq!(t.len(), w.rows().min(w.cols()));
        for pair in t.windows(2) {
            assert!(pair[0].sigma >= pair[1].sigma);
        }
        assert!(t.iter().all(|x| x.sigma >= 0.0));
        let us: Vec<&[f64]> = t.iter().map(|x| x.u.as_slice()).collect();
        let vs: Vec<&[f64]> = t.iter().map(|x| x.v.as_slice()).collect();
        assert!(gram_defect(&us) <= 1e-10, "U defect {}", gram_defect(&us));
        assert!(gram_defect(&vs) <= 1e-10, "V defect {}", gram_defect(&vs));
        let mut diff = reconstruct(&t, w.rows(), w.cols());
        diff.add_scaled(-1.0, w).unwrap();
        assert!(diff.frobenius_norm() <= 1e-9 * w.frobenius_norm().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn diagonal() {
        let t = svd_small_oracle(&Matrix::from_diag(&[2.0, 1.0])).unwrap();
        assert_eq!(t[0].sigma, 2.0);
        assert_eq!(t[1].sigma, 1.0);
        assert_eq!(t[0].u, vec![1.0, 0.0]);
        assert_eq!(t[0].v, vec![1.0, 0.0]);
        assert_eq!(t[1].u, vec![0.0, 1.0]);
        assert_eq!(t[1].v, vec![0.0, 1.0]);
    }

    #[test]
    fn zero_matrix() {
        let w = Matrix::zeros(3, 3);
        let t = svd_small_oracle(&w).unwrap();
        assert!(t.iter().all(|x| x.sigma == 0.0));
        let us: Vec<&[f64]> = t.iter().map(|x| x.u.as_slice()).collect();
        assert!(gram_defect(&us) <= 1e-12);
    }

    #[test]
    fn permutation() {
        let w = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let t = svd_small_oracle(&w).unwrap();
        assert!((t[0].sigma - 1.0).abs() < 1e-15);
        assert!((t[1].sigma - 1.0).abs() < 1e-15);
        check_decomposition(&w);
    }

    #[test]
    fn random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(r, c) in &[(5, 4), (4, 5), (1, 7), (7, 1), (16, 16), (40, 12), (3, 64)] {
            check_decomposition(&Matrix::random_normal(r, c, 1.0, &mut rng));
        }
    }

    #[test]
    fn rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::random_normal(6, 2, 1.0, &mut rng);
        let b = Matrix::random_normal(2, 5, 1.0, &mut rng);
        let w = a.matmul(&b).unwrap();
        check_decomposition(&w);
        let t = svd_small_oracle(&w).unwrap();
        assert!(t[2].sigma <= 1e-12 * t[0].sigma);
    }

    #[test]
    fn dimension_cap() {
        let w = Matrix::zeros(65, 65);
        assert!(matches!(svd_small_oracle(&w), Err(Error::TooLarge { min_dim: 65, cap: 64 })));
        // a tall matrix is fine as long as its smaller side is within the cap
        assert!(svd_small_oracle(&Matrix::identity(1).scaled(2.0)).is_ok());
        assert!(svd_small_oracle(&Matrix::zeros(200, 3)).is_ok());
    }
}
