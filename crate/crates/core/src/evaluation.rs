//! Proxy accuracy, Gaussian Fréchet distance and pseudo-labelling.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::ClassId;
use crate::matrix::{dot, norm, sq_dist, Matrix};

/// Eigenvalues below this are treated as zero in matrix square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Diagonal loading applied when a covariance is estimated from fewer than `2d` rows.
pub const SHRINKAGE_RIDGE: f64 = 1e-6;
pub const DEFAULT_PSEUDO_THRESHOLD: f64 = 0.85;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("class {0} has no training samples")]
    EmptyClass(ClassId),
    #[error("empty input")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{rows} rows but {labels} labels")]
    LabelMismatch { rows: usize, labels: usize },
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("k must be at least 1")]
    BadK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProxyKind {
    #[default]
    NearestCentroid,
    Knn {
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyClassifier {
    pub kind: ProxyKind,
    pub classes: Vec<ClassId>,
    /// One row per entry of `classes` for nearest-centroid; the training rows for k-NN.
    pub reference: Matrix,
    /// Label of each `reference` row.
    pub labels: Vec<ClassId>,
}

fn check_labels(x: &Matrix, labels: &[ClassId]) -> Result<(), EvalError> {
    if x.rows() != labels.len() {
        return Err(EvalError::LabelMismatch {
            rows: x.rows(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Per-class means over `classes`, in that order.
pub fn class_means(x: &Matrix, labels: &[ClassId], classes: &[ClassId]) -> Result<Matrix, EvalError> {
    check_labels(x, labels)?;
    let d = x.cols();
    let mut out = Matrix::zeros(classes.len(), d);
    for (k, &c) in classes.iter().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            return Err(EvalError::EmptyClass(c));
        }
        let m = x.select_rows(&rows).mean();
        out.row_mut(k).copy_from_slice(&m);
    }
    Ok(out)
}

/// Fits a proxy on labelled (selected or synthetic) vectors. Every class in
/// `classes` needs at least one row.
pub fn fit_proxy(
    x: &Matrix,
    labels: &[ClassId],
    classes: &[ClassId],
    kind: ProxyKind,
) -> Result<ProxyClassifier, EvalError> {
    check_labels(x, labels)?;
    if classes.is_empty() || x.rows() == 0 {
        return Err(EvalError::Empty);
    }
    let mut classes = classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    match kind {
        ProxyKind::NearestCentroid => Ok(ProxyClassifier {
            kind,
            reference: class_means(x, labels, &classes)?,
            labels: classes.clone(),
            classes,
        }),
        ProxyKind::Knn { k } => {
            if k == 0 {
                return Err(EvalError::BadK);
            }
            if let Some(&c) = classes.iter().find(|c| !labels.contains(c)) {
                return Err(EvalError::EmptyClass(c));
            }
            Ok(ProxyClassifier {
                kind,
                classes,
                reference: x.clone(),
                labels: labels.to_vec(),
            })
        }
    }
}

impl ProxyClassifier {
    pub fn predict(&self, v: &[f64]) -> ClassId {
        let mut d: Vec<(f64, usize)> = self
            .reference
            .iter_rows()
            .enumerate()
            .map(|(i, r)| (sq_dist(v, r), i))
            .collect();
        match self.kind {
            ProxyKind::NearestCentroid => {
                let (_, i) = d
                    .into_iter()
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .expect("at least one class");
                self.labels[i]
            }
            ProxyKind::Knn { k } => {
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                // Votes, then summed distance, then class id.
                let mut votes: BTreeMap<ClassId, (usize, f64)> = BTreeMap::new();
                for &(dist, i) in d.iter().take(k) {
                    let e = votes.entry(self.labels[i]).or_insert((0, 0.0));
                    e.0 += 1;
                    e.1 += dist;
                }
                votes
                    .into_iter()
                    .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.total_cmp(&b.1 .1)).then(a.0.cmp(&b.0)))
                    .map(|(c, _)| c)
                    .expect("k >= 1")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub per_class: BTreeMap<ClassId, f64>,
    pub n: usize,
}

/// Top-1 accuracy with a per-class breakdown.
pub fn evaluate(clf: &ProxyClassifier, x: &Matrix, labels: &[ClassId]) -> Result<Accuracy, EvalError> {
    check_labels(x, labels)?;
    if x.rows() == 0 {
        return Err(EvalError::Empty);
    }
    if x.cols() != clf.reference.cols() {
        return Err(EvalError::DimMismatch {
            expected: clf.reference.cols(),
            found: x.cols(),
        });
    }
    let mut per: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let hit = clf.predict(x.row(i)) == y;
        correct += hit as usize;
        let e = per.entry(y).or_default();
        e.0 += hit as usize;
        e.1 += 1;
    }
    Ok(Accuracy {
        accuracy: correct as f64 / x.rows() as f64,
        per_class: per
            .into_iter()
            .map(|(c, (h, n))| (c, h as f64 / n as f64))
            .collect(),
        n: x.rows(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: BTreeMap<ClassId, f64>,
    pub frechet: Option<f64>,
    pub provenance: BTreeMap<String, usize>,
    pub config: serde_json::Value,
}

fn covariance(x: &Matrix) -> DMatrix<f64> {
    let n = x.rows();
    let d = x.cols();
    let mean = x.mean();
    let mut c = DMatrix::<f64>::zeros(d, d);
    for r in x.iter_rows() {
        for i in 0..d {
            let ri = r[i] - mean[i];
            for j in i..d {
                c[(i, j)] += ri * (r[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            c[(i, j)] /= denom;
            c[(j, i)] = c[(i, j)];
        }
    }
    if n < 2 * d {
        for i in 0..d {
            c[(i, i)] += SHRINKAGE_RIDGE;
        }
    }
    c
}

/// Symmetric PSD square root; eigenvalues under [`EIGEN_FLOOR`] count as zero.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig
        .eigenvalues
        .map(|l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt_psd(m: DMatrix<f64>) -> f64 {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|&l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() })
        .sum()
}

/// `‖μ_A−μ_B‖² + tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})` from sample moments.
pub fn frechet_distance(a: &Matrix, b: &Matrix) -> Result<f64, EvalError> {
    if a.cols() != b.cols() {
        return Err(EvalError::DimMismatch {
            expected: a.cols(),
            found: b.cols(),
        });
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(EvalError::DegenerateCovariance(
            "need at least two rows per sample".into(),
        ));
    }
    let (ma, mb) = (a.mean(), b.mean());
    let (ca, cb) = (covariance(a), covariance(b));
    let s = sqrt_psd(ca.clone());
    let cross = trace_sqrt_psd(&s * &cb * &s);
    let fd = sq_dist(&ma, &mb) + ca.trace() + cb.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(EvalError::DegenerateCovariance(format!("distance {fd}")));
    }
    Ok(fd.max(0.0))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na > 0.0 && nb > 0.0).then(|| (dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    /// Rows of the unlabelled matrix that received a label.
    pub rows: Vec<usize>,
    pub labels: Vec<ClassId>,
    pub similarity: Vec<f64>,
    pub zero_vectors: Vec<usize>,
}

/// Labels each unlabelled vector with the class whose labelled mean is most
/// cosine-similar, if that similarity reaches `threshold`.
pub fn pseudo_label(
    labeled: &Matrix,
    labels: &[ClassId],
    unlabeled: &Matrix,
    threshold: f64,
) -> Result<PseudoLabels, EvalError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(EvalError::BadThreshold(threshold));
    }
    if labeled.cols() != unlabeled.cols() {
        return Err(EvalError::DimMismatch {
            expected: labeled.cols(),
            found: unlabeled.cols(),
        });
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(EvalError::Empty);
    }
    let centers = class_means(labeled, labels, &classes)?;
    let mut out = PseudoLabels {
        rows: Vec::new(),
        labels: Vec::new(),
        similarity: Vec::new(),
        zero_vectors: Vec::new(),
    };
    for (i, v) in unlabeled.iter_rows().enumerate() {
        if norm(v) == 0.0 {
            out.zero_vectors.push(i);
            continue;
        }
        let best = centers
            .iter_rows()
            .enumerate()
            .filter_map(|(k, c)| cosine(v, c).map(|s| (k, s)))
            .fold(None, |acc: Option<(usize, f64)>, (k, s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((k, s)),
            });
        if let Some((k, s)) = best {
            if s >= threshold {
                out.rows.push(i);
                out.labels.push(classes[k]);
                out.similarity.push(s);
            }
        }
    }
    Ok(out)
}

/// One-sided sign test for "first beats second" over paired runs: the
/// binomial tail `P(X ≥ wins)` with ties dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let mut wins = 0;
    let mut losses = 0;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            wins += 1;
        } else if x < y {
            losses += 1;
        }
    }
    let n = wins + losses;
    let p = (wins..=n).map(|k| binomial_half(n, k)).sum::<f64>().min(1.0);
    SignTest {
        wins,
        losses,
        ties: a.len().min(b.len()) - n,
        p_value: if n == 0 { 1.0 } else { p },
    }
}

fn binomial_half(n: usize, k: usize) -> f64 {
    let mut ln = -(n as f64) * std::f64::consts::LN_2;
    for i in 0..k {
        ln += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    ln.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}
