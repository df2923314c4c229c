//! HDBSCAN over exact mutual-reachability distances.
//!
//! Pipeline: core distances → mutual reachability → minimum spanning tree
//! (Prim, dense, O(n²)) → single-linkage dendrogram → condensed tree →
//! excess-of-mass cluster selection.
//!
//! Merges at exactly equal heights are treated as one simultaneous n-way
//! split when condensing, so the condensed tree does not depend on how the
//! MST happened to order tied edges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{sq_dist, Matrix};

/// Finite stand-in for `1 / 0` so that stabilities stay finite when points
/// coincide.
pub const LAMBDA_CAP: f64 = 1e300;

pub const DEFAULT_MIN_SAMPLES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HdbscanError {
    #[error("too few points: {n} points cannot have a {min_samples}-th neighbour")]
    TooFewPoints { n: usize, min_samples: usize },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl HdbscanParams {
    pub fn new(min_cluster_size: usize, min_samples: usize) -> Self {
        Self {
            min_cluster_size,
            min_samples,
        }
    }
}

/// Distance from each point to its `min_samples`-th nearest other point.
pub fn core_distances(x: &Matrix, min_samples: usize) -> Result<Vec<f64>, HdbscanError> {
    let n = x.rows();
    if min_samples == 0 {
        return Err(HdbscanError::BadParameter("min_samples must be ≥ 1".into()));
    }
    if n <= min_samples {
        return Err(HdbscanError::TooFewPoints { n, min_samples });
    }
    let k = min_samples;
    // Per-point sorted list of the k smallest squared distances seen so far.
    let mut best = vec![f64::INFINITY; n * k];
    for i in 0..n {
        let xi = x.row(i);
        for j in i + 1..n {
            let d = sq_dist(xi, x.row(j));
            push_k(&mut best[i * k..(i + 1) * k], d);
            push_k(&mut best[j * k..(j + 1) * k], d);
        }
    }
    Ok((0..n).map(|i| best[i * k + k - 1].sqrt()).collect())
}

#[inline]
fn push_k(slot: &mut [f64], d: f64) {
    let last = slot.len() - 1;
    if d >= slot[last] {
        return;
    }
    let mut pos = last;
    while pos > 0 && slot[pos - 1] > d {
        slot[pos] = slot[pos - 1];
        pos -= 1;
    }
    slot[pos] = d;
}

/// A symmetric dissimilarity over `0..len()`.
pub trait PairwiseDistances {
    fn len(&self) -> usize;
    fn distance(&self, a: usize, b: usize) -> f64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mutual reachability `max(core(a), core(b), ‖a − b‖)`, evaluated lazily.
#[derive(Debug, Clone)]
pub struct MutualReachability<'a> {
    points: &'a Matrix,
    core: Vec<f64>,
}

impl<'a> MutualReachability<'a> {
    pub fn new(points: &'a Matrix, min_samples: usize) -> Result<Self, HdbscanError> {
        let core = core_distances(points, min_samples)?;
        Ok(Self { points, core })
    }

    pub fn core(&self) -> &[f64] {
        &self.core
    }

    /// Materializes the full `n × n` matrix. Only sensible for small `n`.
    pub fn to_dense(&self) -> DenseDistances {
        let n = self.len();
        let mut m = Matrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    m.row_mut(a)[b] = self.distance(a, b);
                }
            }
        }
        DenseDistances(m)
    }
}

impl PairwiseDistances for MutualReachability<'_> {
    fn len(&self) -> usize {
        self.points.rows()
    }

    #[inline]
    fn distance(&self, a: usize, b: usize) -> f64 {
        let e = sq_dist(self.points.row(a), self.points.row(b)).sqrt();
        e.max(self.core[a]).max(self.core[b])
    }
}

/// An explicit square distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDistances(pub Matrix);

impl PairwiseDistances for DenseDistances {
    fn len(&self) -> usize {
        self.0.rows()
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        self.0.row(a)[b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MstEdge {
    /// Smaller endpoint.
    pub a: usize,
    /// Larger endpoint.
    pub b: usize,
    pub weight: f64,
}

impl MstEdge {
    fn new(u: usize, v: usize, weight: f64) -> Self {
        Self {
            a: u.min(v),
            b: u.max(v),
            weight,
        }
    }

    /// Total order on edges: weight, then `(min index, max index)`.
    fn key_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
    }
}

/// Minimum spanning tree of the complete graph, returned sorted by
/// `(weight, a, b)`.
///
/// Edges are compared under the strict total order of [`MstEdge::key_cmp`],
/// which makes the tree unique even when weights repeat.
pub fn build_mst<D: PairwiseDistances + ?Sized>(d: &D) -> Vec<MstEdge> {
    let n = d.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best: Vec<MstEdge> = (0..n)
        .map(|v| MstEdge::new(0, v, f64::INFINITY))
        .collect();
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next: Option<usize> = None;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let cand = MstEdge::new(current, v, d.distance(current, v));
            if cand.key_cmp(&best[v]).is_lt() {
                best[v] = cand;
            }
            match next {
                Some(u) if best[u].key_cmp(&best[v]).is_le() => {}
                _ => next = Some(v),
            }
        }
        let v = next.expect("graph has unvisited vertices");
        in_tree[v] = true;
        edges.push(best[v]);
        current = v;
    }
    edges.sort_by(|x, y| x.key_cmp(y));
    edges
}

/// One agglomeration step. Node ids `< n` are points; merge `i` creates node
/// `n + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub n_points: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.height).collect()
    }

    fn node_size(&self, node: usize) -> usize {
        if node < self.n_points {
            1
        } else {
            self.merges[node - self.n_points].size
        }
    }

    fn node_height(&self, node: usize) -> f64 {
        if node < self.n_points {
            0.0
        } else {
            self.merges[node - self.n_points].height
        }
    }

    /// Children of `node`, with descendants merged at the same height lifted
    /// into a single n-way split.
    fn flat_children(&self, node: usize) -> Vec<usize> {
        let h = self.node_height(node);
        let mut out = Vec::new();
        let m = self.merges[node - self.n_points];
        let mut stack = vec![m.right, m.left];
        while let Some(c) = stack.pop() {
            if c >= self.n_points && self.node_height(c) == h {
                let cm = self.merges[c - self.n_points];
                stack.push(cm.right);
                stack.push(cm.left);
            } else {
                out.push(c);
            }
        }
        out
    }

    fn leaves(&self, node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(c) = stack.pop() {
            if c < self.n_points {
                out.push(c);
            } else {
                let cm = self.merges[c - self.n_points];
                stack.push(cm.right);
                stack.push(cm.left);
            }
        }
    }
}

/// Single-linkage dendrogram from a sorted MST (Kruskal order).
pub fn single_linkage(n_points: usize, mst: &[MstEdge]) -> Dendrogram {
    let mut parent: Vec<usize> = (0..n_points).collect();
    let mut node_of: Vec<usize> = (0..n_points).collect();
    let mut size = vec![1usize; n_points];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(n_points.saturating_sub(1));
    for e in mst {
        let ra = find(&mut parent, e.a);
        let rb = find(&mut parent, e.b);
        debug_assert_ne!(ra, rb, "MST edge closes a cycle");
        let (na, nb) = (node_of[ra], node_of[rb]);
        let merged = size[ra] + size[rb];
        merges.push(Merge {
            left: na.min(nb),
            right: na.max(nb),
            height: e.weight,
            size: merged,
        });
        parent[rb] = ra;
        size[ra] = merged;
        node_of[ra] = n_points + merges.len() - 1;
    }
    Dendrogram { n_points, merges }
}

#[inline]
pub fn lambda_of(height: f64) -> f64 {
    if height > 0.0 {
        (1.0 / height).min(LAMBDA_CAP)
    } else {
        LAMBDA_CAP
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedCluster {
    pub parent: Option<usize>,
    pub birth_lambda: f64,
    pub size: usize,
    pub children: Vec<usize>,
    pub stability: f64,
}

/// Condensed cluster hierarchy. Cluster 0 is the root; children always have
/// larger ids than their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedTree {
    pub clusters: Vec<CondensedCluster>,
    /// Cluster each point fell out of.
    pub point_cluster: Vec<usize>,
    /// λ at which each point fell out.
    pub point_lambda: Vec<f64>,
}

pub fn condense(dendro: &Dendrogram, min_cluster_size: usize) -> CondensedTree {
    let n = dendro.n_points;
    let mut clusters = vec![CondensedCluster {
        parent: None,
        birth_lambda: 0.0,
        size: n,
        children: Vec::new(),
        stability: 0.0,
    }];
    let mut point_cluster = vec![0usize; n];
    let mut point_lambda = vec![LAMBDA_CAP; n];
    if n < 2 {
        return CondensedTree {
            clusters,
            point_cluster,
            point_lambda,
        };
    }
    let root = n + dendro.merges.len() - 1;
    let mut stack = vec![(root, 0usize)];
    let mut leaves = Vec::new();
    while let Some((node, cid)) = stack.pop() {
        if node < n {
            // Only reachable when a lone point is the cluster's last member.
            point_cluster[node] = cid;
            point_lambda[node] = LAMBDA_CAP;
            continue;
        }
        let lambda = lambda_of(dendro.node_height(node));
        let children = dendro.flat_children(node);
        let big: Vec<usize> = children
            .iter()
            .copied()
            .filter(|&c| dendro.node_size(c) >= min_cluster_size)
            .collect();
        for &c in children
            .iter()
            .filter(|&&c| dendro.node_size(c) < min_cluster_size)
        {
            leaves.clear();
            dendro.leaves(c, &mut leaves);
            for &p in &leaves {
                point_cluster[p] = cid;
                point_lambda[p] = lambda;
            }
        }
        match big.len() {
            0 => {}
            1 => stack.push((big[0], cid)),
            _ => {
                // Reverse so lower-numbered clusters are expanded first.
                let mut new_ids = Vec::with_capacity(big.len());
                for &c in &big {
                    let id = clusters.len();
                    clusters.push(CondensedCluster {
                        parent: Some(cid),
                        birth_lambda: lambda,
                        size: dendro.node_size(c),
                        children: Vec::new(),
                        stability: 0.0,
                    });
                    clusters[cid].children.push(id);
                    new_ids.push((c, id));
                }
                stack.extend(new_ids.into_iter().rev());
            }
        }
    }
    // Stabilities: Σ (λ_exit − λ_birth) over points, plus child clusters
    // leaving as blocks at their birth λ.
    for p in 0..n {
        let c = point_cluster[p];
        clusters[c].stability += point_lambda[p] - clusters[c].birth_lambda;
    }
    for c in 1..clusters.len() {
        let parent = clusters[c].parent.expect("non-root has parent");
        let inc = (clusters[c].birth_lambda - clusters[parent].birth_lambda) * clusters[c].size as f64;
        clusters[parent].stability += inc;
    }
    CondensedTree {
        clusters,
        point_cluster,
        point_lambda,
    }
}

/// Result of a flat clustering. Labels are `None` for outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub labels: Vec<Option<usize>>,
    pub membership: Vec<f64>,
    /// Member (local) row indices per cluster, ascending.
    pub clusters: Vec<Vec<usize>>,
    pub params: HdbscanParams,
    /// Condensed-tree cluster id behind each flat cluster.
    pub selected: Vec<usize>,
    pub tree: CondensedTree,
}

impl ClusterResult {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn outliers(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.is_none().then_some(i))
            .collect()
    }

    /// All points as outliers (for inputs too small to cluster).
    pub fn all_outliers(n: usize, params: HdbscanParams) -> Self {
        Self {
            labels: vec![None; n],
            membership: vec![0.0; n],
            clusters: Vec::new(),
            params,
            selected: Vec::new(),
            tree: CondensedTree {
                clusters: Vec::new(),
                point_cluster: vec![0; n],
                point_lambda: vec![0.0; n],
            },
        }
    }

    /// Labels with the external `-1` outlier sentinel.
    pub fn signed_labels(&self) -> Vec<i64> {
        self.labels
            .iter()
            .map(|l| l.map_or(-1, |c| c as i64))
            .collect()
    }

    pub fn report(&self) -> ClusterReport {
        ClusterReport {
            n_points: self.labels.len(),
            n_clusters: self.n_clusters(),
            cluster_sizes: self.clusters.iter().map(Vec::len).collect(),
            outliers: self.labels.iter().filter(|l| l.is_none()).count(),
            min_cluster_size: self.params.min_cluster_size,
            min_samples: self.params.min_samples,
        }
    }
}

/// Per-class JSON summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n_points: usize,
    pub n_clusters: usize,
    pub cluster_sizes: Vec<usize>,
    pub outliers: usize,
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

/// Excess-of-mass selection over a condensed tree, then labelling.
pub fn select_clusters(tree: CondensedTree, params: HdbscanParams) -> ClusterResult {
    let n = tree.point_cluster.len();
    let mcs = params.min_cluster_size;
    let k = tree.clusters.len();
    let mut selected = vec![false; k];
    let mut subtree = vec![0.0f64; k];
    // Children have larger ids, so a reverse sweep is bottom-up.
    for c in (1..k).rev() {
        let cl = &tree.clusters[c];
        if cl.children.is_empty() {
            selected[c] = true;
            subtree[c] = cl.stability;
            continue;
        }
        let child_sum: f64 = cl.children.iter().map(|&ch| subtree[ch]).sum();
        if cl.stability < child_sum {
            subtree[c] = child_sum;
        } else {
            selected[c] = true;
            subtree[c] = cl.stability;
            let mut stack = cl.children.clone();
            while let Some(d) = stack.pop() {
                selected[d] = false;
                stack.extend_from_slice(&tree.clusters[d].children);
            }
        }
    }

    let root_alone = k > 0 && tree.clusters[0].children.is_empty() && n >= mcs && n > 0;
    let mut labels = vec![None; n];
    let mut chosen = Vec::new();
    if root_alone {
        chosen.push(0);
        let keep_from = root_body_threshold(&tree.point_lambda, mcs);
        for p in 0..n {
            if tree.point_lambda[p] >= keep_from {
                labels[p] = Some(0);
            }
        }
    } else {
        let mut flat_id = vec![None; k];
        for c in 1..k {
            if selected[c] {
                flat_id[c] = Some(chosen.len());
                chosen.push(c);
            }
        }
        for p in 0..n {
            let mut c = tree.point_cluster[p];
            loop {
                if let Some(id) = flat_id[c] {
                    labels[p] = Some(id);
                    break;
                }
                match tree.clusters[c].parent {
                    Some(up) => c = up,
                    None => break,
                }
            }
        }
    }

    let mut clusters = vec![Vec::new(); chosen.len()];
    for (p, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            clusters[*c].push(p);
        }
    }
    let mut membership = vec![0.0; n];
    for members in &clusters {
        let max = members
            .iter()
            .map(|&p| tree.point_lambda[p])
            .fold(0.0f64, f64::max);
        for &p in members {
            membership[p] = if max > 0.0 {
                (tree.point_lambda[p].min(max) / max).clamp(0.0, 1.0)
            } else {
                1.0
            };
        }
    }
    ClusterResult {
        labels,
        membership,
        clusters,
        params,
        selected: chosen,
        tree,
    }
}

/// Exit-λ threshold for the single-cluster fallback: only the densest
/// points stay, the `mcs` highest exit λs plus anything tied with them.
fn root_body_threshold(point_lambda: &[f64], mcs: usize) -> f64 {
    let mut sorted: Vec<f64> = point_lambda.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[mcs - 1]
}

pub fn condense_and_select(
    n_points: usize,
    mst: &[MstEdge],
    params: HdbscanParams,
) -> Result<ClusterResult, HdbscanError> {
    if params.min_cluster_size < 2 {
        return Err(HdbscanError::BadParameter(
            "min_cluster_size must be ≥ 2".into(),
        ));
    }
    let dendro = single_linkage(n_points, mst);
    Ok(select_clusters(condense(&dendro, params.min_cluster_size), params))
}

pub fn hdbscan(x: &Matrix, params: HdbscanParams) -> Result<ClusterResult, HdbscanError> {
    if params.min_cluster_size < 2 {
        return Err(HdbscanError::BadParameter(
            "min_cluster_size must be ≥ 2".into(),
        ));
    }
    let mreach = MutualReachability::new(x, params.min_samples)?;
    let mst = build_mst(&mreach);
    condense_and_select(x.rows(), &mst, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_blob(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    fn brute_core(x: &Matrix, k: usize) -> Vec<f64> {
        (0..x.rows())
            .map(|i| {
                let mut d: Vec<f64> = (0..x.rows())
                    .filter(|&j| j != i)
                    .map(|j| crate::matrix::dist(x.row(i), x.row(j)))
                    .collect();
                d.sort_by(f64::total_cmp);
                d[k - 1]
            })
            .collect()
    }

    #[test]
    fn core_distances_collinear() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]);
        assert_eq!(core_distances(&x, 1).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn core_distances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [4usize, 9, 30] {
            let x = Matrix::from_rows(&gaussian_blob(&mut rng, &[0.0, 0.0, 0.0], 1.0, n));
            for k in 1..n.min(5) {
                let got = core_distances(&x, k).unwrap();
                let want = brute_core(&x, k);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn core_distances_too_few_points() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(
            core_distances(&x, 3),
            Err(HdbscanError::TooFewPoints {
                n: 2,
                min_samples: 3
            })
        );
    }

    #[test]
    fn mutual_reachability_of_coincident_points() {
        let x = Matrix::from_rows(&[[0.0], [0.0], [5.0], [7.0]]);
        let m = MutualReachability::new(&x, 2).unwrap();
        // core(0) = core(1) = 5, so the coincident pair is 5 apart.
        assert_eq!(m.distance(0, 1), 5.0);
    }

    #[test]
    fn mutual_reachability_dominates_euclidean() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Matrix::from_rows(&gaussian_blob(&mut rng, &[0.0, 0.0], 1.0, 10));
        let m = MutualReachability::new(&x, 3).unwrap();
        let core = brute_core(&x, 3);
        for a in 0..10 {
            for b in 0..10 {
                if a == b {
                    continue;
                }
                let e = crate::matrix::dist(x.row(a), x.row(b));
                assert_eq!(m.distance(a, b), m.distance(b, a));
                assert!(m.distance(a, b) >= e);
                assert_eq!(m.distance(a, b), e.max(core[a]).max(core[b]));
            }
        }
    }

    #[test]
    fn mutual_reachability_hand_evaluated() {
        // Points 0, 1, 10 with min_samples = 1: cores are 1, 1, 9.
        let x = Matrix::from_rows(&[[0.0], [1.0], [10.0]]);
        let m = MutualReachability::new(&x, 1).unwrap();
        assert_eq!(m.core(), &[1.0, 1.0, 9.0]);
        assert_eq!(m.distance(0, 1), 1.0);
        assert_eq!(m.distance(1, 2), 9.0);
        assert_eq!(m.distance(0, 2), 10.0);
    }

    fn dense(rows: &[[f64; 3]]) -> DenseDistances {
        DenseDistances(Matrix::from_rows(rows))
    }

    #[test]
    fn mst_triangle() {
        let d = dense(&[[0.0, 1.0, 3.0], [1.0, 0.0, 2.0], [3.0, 2.0, 0.0]]);
        let mst = build_mst(&d);
        assert_eq!(
            mst,
            vec![MstEdge::new(0, 1, 1.0), MstEdge::new(1, 2, 2.0)]
        );
    }

    #[test]
    fn mst_ties_follow_index_order() {
        let d = dense(&[[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]]);
        let mst = build_mst(&d);
        assert_eq!(
            mst,
            vec![MstEdge::new(0, 1, 1.0), MstEdge::new(0, 2, 1.0)]
        );
    }

    /// Enumerates every spanning tree of a complete graph on ≤ 6 vertices.
    fn brute_mst_weight(d: &DenseDistances) -> f64 {
        let n = d.len();
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
        let mut best = f64::INFINITY;
        let m = edges.len();
        for mask in 0u32..(1 << m) {
            if mask.count_ones() as usize != n - 1 {
                continue;
            }
            let mut parent: Vec<usize> = (0..n).collect();
            fn find(p: &mut [usize], x: usize) -> usize {
                if p[x] != x {
                    let r = find(p, p[x]);
                    p[x] = r;
                }
                p[x]
            }
            let mut ok = true;
            let mut w = 0.0;
            for (i, &(a, b)) in edges.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra == rb {
                        ok = false;
                        break;
                    }
                    parent[ra] = rb;
                    w += d.distance(a, b);
                }
            }
            if ok {
                best = best.min(w);
            }
        }
        best
    }

    #[test]
    fn mst_weight_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..30 {
            let n = 2 + trial % 5;
            let x = Matrix::from_rows(&gaussian_blob(&mut rng, &[0.0, 0.0], 1.0, n));
            let mut m = Matrix::zeros(n, n);
            for a in 0..n {
                for b in 0..n {
                    m.row_mut(a)[b] = crate::matrix::dist(x.row(a), x.row(b));
                }
            }
            let d = DenseDistances(m);
            let total: f64 = build_mst(&d).iter().map(|e| e.weight).sum();
            assert!((total - brute_mst_weight(&d)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_linkage_merges_in_order() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [5.0]]);
        let mreach = MutualReachability::new(&x, 1).unwrap();
        let dendro = single_linkage(3, &build_mst(&mreach));
        assert_eq!(dendro.heights(), vec![1.0, 4.0]);
        assert_eq!(dendro.merges[1].size, 3);
    }

    #[test]
    fn two_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = gaussian_blob(&mut rng, &[0.0, 0.0], 0.5, 10);
        pts.extend(gaussian_blob(&mut rng, &[20.0, 0.0], 0.5, 10));
        let r = hdbscan(&Matrix::from_rows(&pts), HdbscanParams::new(5, 3)).unwrap();
        assert_eq!(r.n_clusters(), 2);
        assert!(r.outliers().is_empty());
        let first = r.labels[0];
        assert!(r.labels[..10].iter().all(|&l| l == first));
        assert!(r.labels[10..].iter().all(|&l| l != first));
    }

    #[test]
    fn too_small_for_any_cluster() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0], [7.0, -1.0]]);
        let r = hdbscan(&x, HdbscanParams::new(5, 3)).unwrap();
        assert_eq!(r.n_clusters(), 0);
        assert_eq!(r.outliers().len(), 4);
        assert!(r.membership.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn cube_plus_far_points_is_one_cluster_with_outliers() {
        // 30 vertices of the unit 5-cube: each keeps at least three unit
        // neighbours, so every core distance and MST edge is exactly 1 and the
        // root never splits. The three far points drop out long before.
        let mut pts: Vec<Vec<f64>> = (0..30u32)
            .map(|v| (0..5).map(|b| ((v >> b) & 1) as f64).collect())
            .collect();
        pts.push(vec![100.0, 0.0, 0.0, 0.0, 0.0]);
        pts.push(vec![0.0, -120.0, 0.0, 0.0, 0.0]);
        pts.push(vec![-90.0, 90.0, 0.0, 0.0, 0.0]);
        let r = hdbscan(&Matrix::from_rows(&pts), HdbscanParams::new(10, 3)).unwrap();
        assert_eq!(r.n_clusters(), 1);
        assert_eq!(r.outliers(), vec![30, 31, 32]);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let x = Matrix::from_rows(&[[1.5, -2.0]; 12]);
        let r = hdbscan(&x, HdbscanParams::new(5, 3)).unwrap();
        assert_eq!(r.n_clusters(), 1);
        assert_eq!(r.clusters[0].len(), 12);
        assert!(r.membership.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn five_planted_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let centers = [
            [0.0, 0.0],
            [30.0, 0.0],
            [0.0, 30.0],
            [30.0, 30.0],
            [15.0, 60.0],
        ];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (m, c) in centers.iter().enumerate() {
            pts.extend(gaussian_blob(&mut rng, c, 1.0, 200));
            truth.extend(std::iter::repeat_n(m, 200));
        }
        let r = hdbscan(&Matrix::from_rows(&pts), HdbscanParams::new(50, 3)).unwrap();
        assert_eq!(r.n_clusters(), 5);
        // Majority mode per cluster, then agreement over non-outliers.
        let mut agree = 0;
        let mut total = 0;
        for members in &r.clusters {
            let mut counts = [0usize; 5];
            for &p in members {
                counts[truth[p]] += 1;
            }
            agree += counts.iter().max().unwrap();
            total += members.len();
        }
        assert!(agree as f64 >= 0.99 * total as f64);
    }

    #[test]
    fn invariants_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = 10 + trial * 7;
            let pts = gaussian_blob(&mut rng, &[0.0, 0.0, 0.0], 1.0, n);
            let mcs = 2 + trial % 6;
            let r = hdbscan(&Matrix::from_rows(&pts), HdbscanParams::new(mcs, 3)).unwrap();
            let mut seen = vec![false; n];
            for (c, members) in r.clusters.iter().enumerate() {
                assert!(members.len() >= mcs);
                for &p in members {
                    assert_eq!(r.labels[p], Some(c));
                    assert!(!seen[p]);
                    seen[p] = true;
                }
            }
            for p in 0..n {
                assert!((0.0..=1.0).contains(&r.membership[p]));
                if r.labels[p].is_none() {
                    assert_eq!(r.membership[p], 0.0);
                    assert!(!seen[p]);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::from_rows(&gaussian_blob(&mut rng, &[0.0, 0.0], 1.0, 80));
        let a = hdbscan(&x, HdbscanParams::new(5, 3)).unwrap();
        let b = hdbscan(&x, HdbscanParams::new(5, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn signed_labels_and_report() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0], [7.0, -1.0]]);
        let r = hdbscan(&x, HdbscanParams::new(5, 3)).unwrap();
        assert_eq!(r.signed_labels(), vec![-1; 4]);
        let rep = r.report();
        assert_eq!(rep.outliers, 4);
        assert_eq!(rep.n_clusters, 0);
    }

    #[test]
    fn bad_min_cluster_size() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]);
        assert!(matches!(
            hdbscan(&x, HdbscanParams::new(1, 1)),
            Err(HdbscanError::BadParameter(_))
        ));
    }
}
