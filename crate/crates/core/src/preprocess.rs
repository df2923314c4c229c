//! Dimensionality reduction ahead of density clustering.
//!
//! The native path is PCA on the centred sample covariance. Embeddings that
//! were reduced by an external tool (UMAP and friends) go through
//! [`Preprocess::None`] untouched.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub const DEFAULT_DIM: usize = 50;

/// Relative tolerance under which two eigenvalues count as tied.
const EIGEN_TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("bad dimension: {0}")]
    BadDim(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Preprocess {
    /// Embeddings are clustered as given.
    #[default]
    None,
    Pca { dim: usize },
}

/// A fitted affine projection `x ↦ (x − mean) · componentsᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReducer {
    pub mean: Vec<f64>,
    /// `out_dim × in_dim`, orthonormal rows.
    pub components: Matrix,
    /// Variance captured by each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl LinearReducer {
    pub fn in_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix, PreprocessError> {
        if x.cols() != self.in_dim() {
            return Err(PreprocessError::BadDim(format!(
                "input has {} columns, reducer expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), self.out_dim());
        let mut centred = vec![0.0; self.in_dim()];
        for i in 0..x.rows() {
            for ((c, v), m) in centred.iter_mut().zip(x.row(i)).zip(&self.mean) {
                *c = v - m;
            }
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = crate::matrix::dot(&centred, self.components.row(k));
            }
        }
        Ok(out)
    }

    /// Maps reduced coordinates back into the input space.
    pub fn inverse_transform(&self, y: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(y.rows(), self.in_dim());
        for i in 0..y.rows() {
            let row = out.row_mut(i);
            row.copy_from_slice(&self.mean);
            for (k, &coef) in y.row(i).iter().enumerate() {
                for (o, c) in row.iter_mut().zip(self.components.row(k)) {
                    *o += coef * c;
                }
            }
        }
        out
    }
}

/// Fits a `d`-component PCA on the rows of `x`.
pub fn fit_pca(x: &Matrix, d: usize) -> Result<LinearReducer, PreprocessError> {
    let (n, dim) = (x.rows(), x.cols());
    if n < 2 {
        return Err(PreprocessError::DegenerateInput(format!(
            "need at least 2 rows, got {n}"
        )));
    }
    if d == 0 || d > n.min(dim) {
        return Err(PreprocessError::BadDim(format!(
            "target dimension {d} outside 1..={}",
            n.min(dim)
        )));
    }
    let mean = x.mean();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centred = vec![0.0; dim];
    for r in x.iter_rows() {
        for ((c, v), m) in centred.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        for a in 0..dim {
            let ca = centred[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..dim {
                cov[(a, b)] += ca * centred[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let total_variance = cov.trace();
    if !(total_variance > 0.0) {
        return Err(PreprocessError::DegenerateInput(
            "all rows are identical (rank 0)".into(),
        ));
    }

    let eig = SymmetricEigen::new(cov);
    let mut pairs: Vec<(f64, Vec<f64>, usize)> = (0..dim)
        .map(|k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = canonical_sign(&mut v);
            (eig.eigenvalues[k].max(0.0), v, lead)
        })
        .collect();
    pairs.sort_by(|a, b| {
        let scale = a.0.abs().max(b.0.abs()).max(f64::MIN_POSITIVE);
        if (a.0 - b.0).abs() <= EIGEN_TIE_RTOL * scale {
            a.2.cmp(&b.2)
        } else {
            b.0.total_cmp(&a.0)
        }
    });

    let mut components = Matrix::zeros(d, dim);
    let mut explained_variance = Vec::with_capacity(d);
    for (k, (val, vec, _)) in pairs.into_iter().take(d).enumerate() {
        components.row_mut(k).copy_from_slice(&vec);
        explained_variance.push(val);
    }
    Ok(LinearReducer {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

/// Flips `v` so its largest-magnitude coordinate is positive; returns that
/// coordinate's axis (first one on ties).
fn canonical_sign(v: &mut [f64]) -> usize {
    let mut lead = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[lead].abs() {
            lead = i;
        }
    }
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    lead
}

/// Applies the configured preprocessing to one class's rows. The target
/// dimension is clamped to what the data supports.
pub fn apply(kind: Preprocess, x: &Matrix) -> Result<Matrix, PreprocessError> {
    match kind {
        Preprocess::None => Ok(x.clone()),
        Preprocess::Pca { dim } => {
            let d = dim.min(x.rows()).min(x.cols());
            if d == 0 {
                return Err(PreprocessError::BadDim("target dimension 0".into()));
            }
            match fit_pca(x, d) {
                Ok(r) => r.transform(x),
                // Identical rows have no principal directions; any projection
                // collapses them to the same point.
                Err(PreprocessError::DegenerateInput(_)) if x.rows() >= 2 => {
                    Ok(Matrix::zeros(x.rows(), d))
                }
                Err(e) => Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{dist, dot};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(n, d, data)
    }

    /// Cyclic Jacobi eigenvalue iteration; independent of nalgebra.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn covariance(x: &Matrix) -> Vec<Vec<f64>> {
        let m = x.mean();
        let d = x.cols();
        let mut c = vec![vec![0.0; d]; d];
        for r in x.iter_rows() {
            for a in 0..d {
                for b in 0..d {
                    c[a][b] += (r[a] - m[a]) * (r[b] - m[b]);
                }
            }
        }
        let den = (x.rows() - 1) as f64;
        c.iter_mut().flatten().for_each(|v| *v /= den);
        c
    }

    #[test]
    fn line_in_3d_has_one_component() {
        let dir = [1.0, 2.0, -2.0];
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| dir.iter().map(|c| c * (i as f64 - 2.5) + 0.5).collect())
            .collect();
        let x = Matrix::from_rows(&rows);
        let r = fit_pca(&x, 1).unwrap();
        let c = r.components.row(0);
        let cos = dot(c, &dir) / 3.0;
        assert!((cos.abs() - 1.0).abs() < 1e-9, "cos = {cos}");
        let back = r.inverse_transform(&r.transform(&x).unwrap());
        for i in 0..x.rows() {
            assert!(dist(back.row(i), x.row(i)) < 1e-9);
        }
        assert!((r.explained_variance[0] - r.total_variance).abs() < 1e-9);
    }

    #[test]
    fn full_dimension_captures_total_variance() {
        let x = random_matrix(40, 6, 1);
        let r = fit_pca(&x, 6).unwrap();
        let captured: f64 = r.explained_variance.iter().sum();
        assert!((captured - r.total_variance).abs() <= 1e-9 * r.total_variance);
        for w in r.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for a in 0..6 {
            for b in 0..6 {
                let expect = if a == b { 1.0 } else { 0.0 };
                let got = dot(r.components.row(a), r.components.row(b));
                assert!((got - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reconstruction_error_matches_trailing_eigenvalues() {
        let x = random_matrix(100, 10, 7);
        let oracle = jacobi_eigenvalues(covariance(&x));
        let r = fit_pca(&x, 3).unwrap();
        for (got, want) in r.explained_variance.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        let back = r.inverse_transform(&r.transform(&x).unwrap());
        let err: f64 = (0..x.rows())
            .map(|i| crate::matrix::sq_dist(back.row(i), x.row(i)))
            .sum::<f64>()
            / 99.0;
        let trailing: f64 = oracle[3..].iter().sum();
        assert!((err - trailing).abs() < 1e-9 * trailing, "{err} vs {trailing}");
    }

    #[test]
    fn transform_of_mean_is_zero() {
        let x = random_matrix(30, 5, 3);
        let r = fit_pca(&x, 2).unwrap();
        let mean = Matrix::from_rows(std::slice::from_ref(&r.mean));
        let z = r.transform(&mean).unwrap();
        assert!(z.row(0).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn full_rank_transform_is_isometry() {
        let x = random_matrix(25, 4, 11);
        let y = fit_pca(&x, 4).unwrap().transform(&x).unwrap();
        for i in 0..x.rows() {
            for j in 0..i {
                assert!((dist(x.row(i), x.row(j)) - dist(y.row(i), y.row(j))).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_distortion_matches_oracle_subspace() {
        // The projected squared distance equals the squared distance minus the
        // energy in the discarded eigen-directions; check via reconstruction.
        let x = random_matrix(60, 8, 5);
        let r = fit_pca(&x, 3).unwrap();
        let y = r.transform(&x).unwrap();
        let back = r.inverse_transform(&y);
        for i in 0..10 {
            for j in 0..i {
                let proj = dist(y.row(i), y.row(j));
                let recon = dist(back.row(i), back.row(j));
                assert!((proj - recon).abs() < 1e-9);
                assert!(proj <= dist(x.row(i), x.row(j)) + 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let x = random_matrix(5, 3, 0);
        assert!(matches!(fit_pca(&x, 0), Err(PreprocessError::BadDim(_))));
        assert!(matches!(fit_pca(&x, 4), Err(PreprocessError::BadDim(_))));
        let one = random_matrix(1, 3, 0);
        assert!(matches!(
            fit_pca(&one, 1),
            Err(PreprocessError::DegenerateInput(_))
        ));
        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        assert!(matches!(
            fit_pca(&same, 1),
            Err(PreprocessError::DegenerateInput(_))
        ));
        let r = fit_pca(&x, 2).unwrap();
        assert!(matches!(
            r.transform(&random_matrix(2, 4, 0)),
            Err(PreprocessError::BadDim(_))
        ));
    }

    #[test]
    fn deterministic_and_sign_fixed() {
        let x = random_matrix(50, 5, 9);
        let a = fit_pca(&x, 3).unwrap();
        let b = fit_pca(&x, 3).unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            let row = a.components.row(k);
            let lead = row
                .iter()
                .copied()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn isotropic_ties_follow_axis_order() {
        // Axis-aligned square: equal variance on both axes.
        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let r = fit_pca(&x, 2).unwrap();
        assert!((r.explained_variance[0] - r.explained_variance[1]).abs() < 1e-12);
    }

    #[test]
    fn apply_clamps_and_passes_through() {
        let x = random_matrix(10, 3, 2);
        assert_eq!(apply(Preprocess::None, &x).unwrap(), x);
        let y = apply(Preprocess::Pca { dim: 50 }, &x).unwrap();
        assert_eq!(y.cols(), 3);
        assert_eq!(y.rows(), 10);
    }
}
