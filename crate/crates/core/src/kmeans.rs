//! Seeded Lloyd's K-Means with inertia tracking.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{sq_dist, Matrix};

pub const DEFAULT_MAX_ITER: usize = 300;
/// Convergence threshold on the largest squared centroid shift.
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KMeansError {
    #[error("too few points: {n} points for k = {k}")]
    TooFewPoints { n: usize, k: usize },
    #[error("seeds {0} and {1} coincide")]
    DuplicateSeeds(usize, usize),
    #[error("expected {expected} seed rows of dimension {dim}")]
    BadSeeds { expected: usize, dim: usize },
    #[error("need at least two distinct candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("every row is already taken")]
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansOutcome {
    pub assignment: Vec<usize>,
    pub centroids: Matrix,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
    pub seeds_used: Matrix,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeansOutcome {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == cluster).then_some(i))
            .collect()
    }
}

/// Lloyd iterations from the given seeds.
///
/// Stops when the assignment reaches a fixed point, when the largest
/// squared centroid shift drops below `tol`, or after `max_iter` rounds.
/// An emptied cluster takes over the point farthest from its centroid.
pub fn kmeans(
    x: &Matrix,
    k: usize,
    seeds: &Matrix,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansOutcome, KMeansError> {
    let n = x.rows();
    if k == 0 || n < k {
        return Err(KMeansError::TooFewPoints { n, k });
    }
    if seeds.rows() != k || seeds.cols() != x.cols() {
        return Err(KMeansError::BadSeeds {
            expected: k,
            dim: x.cols(),
        });
    }
    for a in 0..k {
        for b in a + 1..k {
            if seeds.row(a) == seeds.row(b) {
                return Err(KMeansError::DuplicateSeeds(a, b));
            }
        }
    }

    let mut centroids = seeds.clone();
    let mut assignment = vec![usize::MAX; n];
    let mut dist_to = vec![0.0; n];
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let changed = assign(x, &mut centroids, &mut assignment, &mut dist_to);
        let inertia: f64 = dist_to.iter().sum();
        if let Some(&prev) = history.last() {
            debug_assert!(
                inertia <= prev * (1.0 + 1e-12) + 1e-12,
                "inertia rose from {prev} to {inertia}"
            );
        }
        history.push(inertia);
        if !changed || iterations >= max_iter {
            break;
        }
        let shift = update_centroids(x, &assignment, &mut centroids);
        if shift < tol {
            assign(x, &mut centroids, &mut assignment, &mut dist_to);
            history.push(dist_to.iter().sum());
            break;
        }
    }
    Ok(KMeansOutcome {
        assignment,
        inertia: dist_to.iter().sum(),
        centroids,
        iterations,
        seeds_used: seeds.clone(),
        inertia_history: history,
    })
}

/// Assignment step plus empty-cluster repair. Returns whether any label
/// changed.
fn assign(
    x: &Matrix,
    centroids: &mut Matrix,
    assignment: &mut [usize],
    dist_to: &mut [f64],
) -> bool {
    let mut changed = false;
    for i in 0..x.rows() {
        let (c, d) = nearest(x.row(i), centroids);
        if assignment[i] != c {
            assignment[i] = c;
            changed = true;
        }
        dist_to[i] = d;
    }
    changed | repair_empty(x, assignment, dist_to, centroids)
}

/// Nearest centroid (smallest index on ties) and its squared distance.
#[inline]
fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Moves each empty cluster's centroid onto the point farthest from its own
/// centroid (among clusters that can spare one).
fn repair_empty(
    x: &Matrix,
    assignment: &mut [usize],
    dist_to: &mut [f64],
    centroids: &mut Matrix,
) -> bool {
    let k = centroids.rows();
    let mut repaired = false;
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return repaired;
        };
        let mut far: Option<usize> = None;
        for i in 0..assignment.len() {
            if counts[assignment[i]] < 2 {
                continue;
            }
            match far {
                Some(f) if dist_to[f] >= dist_to[i] => {}
                _ => far = Some(i),
            }
        }
        let Some(i) = far else { return repaired };
        assignment[i] = empty;
        dist_to[i] = 0.0;
        centroids.row_mut(empty).copy_from_slice(x.row(i));
        repaired = true;
    }
}

/// Moves centroids to member means; returns the largest squared shift.
fn update_centroids(x: &Matrix, assignment: &[usize], centroids: &mut Matrix) -> f64 {
    let k = centroids.rows();
    let d = x.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    let mut shift = 0.0f64;
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        sums.row_mut(c).iter_mut().for_each(|s| *s *= inv);
        shift = shift.max(sq_dist(sums.row(c), centroids.row(c)));
        centroids.row_mut(c).copy_from_slice(sums.row(c));
    }
    shift
}

/// Runs 2-means on `x` from every unordered pair of candidate seeds and keeps
/// the lowest-inertia outcome (lexicographically first pair on ties).
///
/// Candidates at identical positions are collapsed first.
pub fn best_pair_split(
    x: &Matrix,
    candidates: &Matrix,
) -> Result<(KMeansOutcome, (usize, usize)), KMeansError> {
    if x.rows() < 2 {
        return Err(KMeansError::TooFewPoints { n: x.rows(), k: 2 });
    }
    let mut distinct: Vec<usize> = Vec::new();
    for i in 0..candidates.rows() {
        if !distinct
            .iter()
            .any(|&j| candidates.row(j) == candidates.row(i))
        {
            distinct.push(i);
        }
    }
    if distinct.len() < 2 {
        return Err(KMeansError::TooFewCandidates(distinct.len()));
    }
    let mut best: Option<(KMeansOutcome, (usize, usize))> = None;
    for (ai, &a) in distinct.iter().enumerate() {
        for &b in &distinct[ai + 1..] {
            let seeds = candidates.select_rows(&[a, b]);
            let out = kmeans(x, 2, &seeds, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
            match &best {
                Some((cur, _)) if cur.inertia <= out.inertia => {}
                _ => best = Some((out, (a, b))),
            }
        }
    }
    Ok(best.expect("at least one pair"))
}

/// Index of the untaken row closest to `centroid` (smallest index on ties).
pub fn nearest_real_point(
    centroid: &[f64],
    x: &Matrix,
    taken: &[bool],
) -> Result<usize, KMeansError> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..x.rows() {
        if taken.get(i).copied().unwrap_or(false) {
            continue;
        }
        let d = sq_dist(centroid, x.row(i));
        match best {
            Some((_, bd)) if bd <= d => {}
            _ => best = Some((i, d)),
        }
    }
    best.map(|(i, _)| i).ok_or(KMeansError::Exhausted)
}

/// k-means++ seeding restricted to distinct positions.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(
    x: &Matrix,
    k: usize,
    rng: &mut R,
) -> Result<Matrix, KMeansError> {
    let n = x.rows();
    if k == 0 || n < k {
        return Err(KMeansError::TooFewPoints { n, k });
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i), x.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            // Fewer than k distinct positions.
            return Err(KMeansError::TooFewPoints { n: chosen.len(), k });
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        let p = pick.expect("positive total weight");
        chosen.push(p);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), x.row(p)));
        }
    }
    Ok(x.select_rows(&chosen))
}

/// Plain K-Means selection: k-means++ then Lloyd, each centroid mapped to its
/// nearest not-yet-chosen row.
pub fn kmeans_select<R: Rng + ?Sized>(
    x: &Matrix,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>, KMeansError> {
    let seeds = kmeans_plus_plus(x, k, rng)?;
    let out = kmeans(x, k, &seeds, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let mut taken = vec![false; x.rows()];
    let mut picked = Vec::with_capacity(k);
    for c in 0..k {
        let i = nearest_real_point(out.centroids.row(c), x, &taken)?;
        taken[i] = true;
        picked.push(i);
    }
    Ok(picked)
}
