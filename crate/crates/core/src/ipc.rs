//! Turning a flat clustering into exactly IPC representatives per class.
//!
//! Cluster representatives are the highest-membership points. When there are
//! too few clusters the worklist is refined by splitting large clusters,
//! clustering the outliers, and finally by splitting with a relaxed minimum
//! cluster size.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{ClassId, ClassView};
use crate::hdbscan::{self, ClusterReport, ClusterResult, HdbscanError, HdbscanParams};
use crate::kmeans::{self, KMeansError};
use crate::matrix::Matrix;
use crate::preprocess::{self, Preprocess, PreprocessError};

/// Shrink factor applied to `min_size` between forced-split attempts.
pub const RELAX_FACTOR: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum IpcError {
    #[error("empty cluster")]
    EmptyCluster,
    #[error("{have} outliers cannot supply {need} representatives")]
    InsufficientOutliers { have: usize, need: usize },
    #[error("stuck at {have} of {need} representatives: {}", diagnostics.join("; "))]
    CannotReachIpc {
        have: usize,
        need: usize,
        diagnostics: Vec<String>,
    },
    #[error("class has {n} points, fewer than ipc = {ipc}")]
    TooFewPoints { n: usize, ipc: usize },
    #[error("ipc must be at least 1")]
    ZeroIpc,
    #[error(transparent)]
    Hdbscan(#[from] HdbscanError),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Provenance {
    InitCluster,
    Split,
    Outlier,
    ForcedSplit,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::InitCluster,
        Provenance::Split,
        Provenance::Outlier,
        Provenance::ForcedSplit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::InitCluster => "InitCluster",
            Provenance::Split => "Split",
            Provenance::Outlier => "Outlier",
            Provenance::ForcedSplit => "ForcedSplit",
        }
    }
}

/// A live cluster and its representative, both as local row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveCluster {
    pub id: usize,
    pub members: Vec<usize>,
    pub rep: usize,
    pub provenance: Provenance,
}

/// One selected representative in local (class-view) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub local: usize,
    pub provenance: Provenance,
    pub cluster_size: usize,
}

/// Mutable state of the matching procedure over one class.
///
/// Every live cluster carries exactly one representative, so the
/// representative count is always `clusters.len()`.
#[derive(Debug, Clone)]
pub struct WorkState<'a> {
    points: &'a Matrix,
    pub clusters: Vec<LiveCluster>,
    /// Cluster ids eligible for splitting.
    pub worklist: Vec<usize>,
    pub outliers: Vec<usize>,
    pub min_samples: usize,
    pub diagnostics: Vec<String>,
    /// State-changing transitions so far.
    pub steps: usize,
    pub created: usize,
    next_id: usize,
}

/// Member with the highest membership; smallest index on ties.
pub fn pick_representative(members: &[usize], membership: &[f64]) -> Result<usize, IpcError> {
    let mut best: Option<usize> = None;
    for &m in members {
        match best {
            Some(b) if membership[b] > membership[m] || (membership[b] == membership[m] && b < m) => {}
            _ => best = Some(m),
        }
    }
    best.ok_or(IpcError::EmptyCluster)
}

impl<'a> WorkState<'a> {
    /// Initial state: one cluster and representative per flat cluster.
    pub fn new(points: &'a Matrix, result: &ClusterResult) -> Result<Self, IpcError> {
        let mut clusters = Vec::with_capacity(result.n_clusters());
        for (id, members) in result.clusters.iter().enumerate() {
            clusters.push(LiveCluster {
                id,
                members: members.clone(),
                rep: pick_representative(members, &result.membership)?,
                provenance: Provenance::InitCluster,
            });
        }
        let n = clusters.len();
        Ok(Self {
            points,
            clusters,
            worklist: Vec::new(),
            outliers: result.outliers(),
            min_samples: result.params.min_samples,
            diagnostics: Vec::new(),
            steps: 0,
            created: n,
            next_id: n,
        })
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn cluster(&self, id: usize) -> Option<&LiveCluster> {
        self.clusters.iter().find(|c| c.id == id)
    }

    /// Rebuilds the worklist from live clusters larger than `2 * min_size`.
    pub fn rebuild_worklist(&mut self, min_size: usize) {
        self.worklist = self
            .clusters
            .iter()
            .filter(|c| c.members.len() > 2 * min_size)
            .map(|c| c.id)
            .collect();
    }

    /// Removes and returns the largest worklist cluster (smallest id on ties).
    pub fn pop_largest(&mut self) -> Option<usize> {
        let pos = self
            .worklist
            .iter()
            .enumerate()
            .filter_map(|(pos, &id)| self.cluster(id).map(|c| (pos, c.members.len(), id)))
            .min_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)))
            .map(|(pos, _, _)| pos)?;
        Some(self.worklist.remove(pos))
    }

    fn push_cluster(&mut self, members: Vec<usize>, rep: usize, provenance: Provenance) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.created += 1;
        self.clusters.push(LiveCluster {
            id,
            members,
            rep,
            provenance,
        });
        id
    }

    pub fn selections(&self) -> Vec<Selection> {
        let mut out: Vec<Selection> = self
            .clusters
            .iter()
            .map(|c| Selection {
                local: c.rep,
                provenance: c.provenance,
                cluster_size: c.members.len(),
            })
            .collect();
        sort_selections(&mut out);
        out
    }
}

/// Canonical order: larger source cluster first, then provenance, then row.
pub fn sort_selections(s: &mut [Selection]) {
    s.sort_by(|a, b| {
        b.cluster_size
            .cmp(&a.cluster_size)
            .then(a.provenance.cmp(&b.provenance))
            .then(a.local.cmp(&b.local))
    });
}

/// Keeps the representatives of the `ipc` largest clusters (smaller id on ties).
pub fn truncate_to_ipc(state: &mut WorkState<'_>, ipc: usize) {
    let mut order: Vec<usize> = (0..state.clusters.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&state.clusters[a], &state.clusters[b]);
        cb.members.len().cmp(&ca.members.len()).then(ca.id.cmp(&cb.id))
    });
    let mut keep = vec![false; state.clusters.len()];
    for &i in order.iter().take(ipc) {
        keep[i] = true;
    }
    let mut i = 0;
    state.clusters.retain(|_| {
        i += 1;
        keep[i - 1]
    });
    state.worklist.retain(|id| state.clusters.iter().any(|c| c.id == *id));
    state.steps += 1;
}

/// Splits `mother` in two if an inner clustering finds at least two
/// sub-clusters. Returns whether the split happened.
pub fn split_cluster(
    state: &mut WorkState<'_>,
    mother: usize,
    min_cluster_size: usize,
    provenance: Provenance,
) -> Result<bool, IpcError> {
    let Some(pos) = state.clusters.iter().position(|c| c.id == mother) else {
        return Ok(false);
    };
    let members = state.clusters[pos].members.clone();
    if members.len() <= state.min_samples || min_cluster_size < 2 {
        return Ok(false);
    }
    let sub = state.points.select_rows(&members);
    let params = HdbscanParams::new(min_cluster_size, state.min_samples);
    let inner = hdbscan::hdbscan(&sub, params)?;
    if inner.n_clusters() < 2 {
        return Ok(false);
    }
    let mut cand = Vec::with_capacity(inner.n_clusters());
    for c in &inner.clusters {
        cand.push(pick_representative(c, &inner.membership)?);
    }
    let candidates = sub.select_rows(&cand);
    let (outcome, _) = match kmeans::best_pair_split(&sub, &candidates) {
        Ok(r) => r,
        Err(KMeansError::TooFewCandidates(_)) => return Ok(false),
        Err(e) => return Err(e.into()),
    };
    replace_with_children(state, pos, &sub, &outcome, min_cluster_size, provenance)?;
    Ok(true)
}

/// Swaps the cluster at `pos` for the two K-Means children in `outcome`;
/// children larger than `2 * min_size` join the worklist.
fn replace_with_children(
    state: &mut WorkState<'_>,
    pos: usize,
    sub: &Matrix,
    outcome: &kmeans::KMeansOutcome,
    min_size: usize,
    provenance: Provenance,
) -> Result<(), IpcError> {
    let mother = state.clusters[pos].id;
    let members = state.clusters[pos].members.clone();
    let mut children = Vec::with_capacity(2);
    for k in 0..2 {
        let local = outcome.members(k);
        let child_points = sub.select_rows(&local);
        let r = kmeans::nearest_real_point(outcome.centroids.row(k), &child_points, &[])?;
        let rows: Vec<usize> = local.iter().map(|&i| members[i]).collect();
        children.push((rows, members[local[r]]));
    }
    state.clusters.remove(pos);
    state.worklist.retain(|&id| id != mother);
    for (rows, rep) in children {
        let big = rows.len() > 2 * min_size;
        let id = state.push_cluster(rows, rep, provenance);
        if big {
            state.worklist.push(id);
        }
    }
    state.steps += 1;
    Ok(())
}

/// Last resort once no mother can be split by density: a plain 2-means split
/// of the largest cluster holding at least two distinct positions.
pub fn kmeans_split<R: Rng + ?Sized>(state: &mut WorkState<'_>, rng: &mut R) -> Result<bool, IpcError> {
    let mut order: Vec<usize> = (0..state.clusters.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&state.clusters[a], &state.clusters[b]);
        cb.members.len().cmp(&ca.members.len()).then(ca.id.cmp(&cb.id))
    });
    for pos in order {
        if state.clusters[pos].members.len() < 2 {
            continue;
        }
        let sub = state.points.select_rows(&state.clusters[pos].members);
        let seeds = match kmeans::kmeans_plus_plus(&sub, 2, rng) {
            Ok(s) => s,
            Err(KMeansError::TooFewPoints { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let outcome = kmeans::kmeans(&sub, 2, &seeds, kmeans::DEFAULT_MAX_ITER, kmeans::DEFAULT_TOL)?;
        let (id, n) = (state.clusters[pos].id, sub.rows());
        state
            .diagnostics
            .push(format!("cluster {id} ({n} points) split by 2-means"));
        replace_with_children(state, pos, &sub, &outcome, 2, Provenance::ForcedSplit)?;
        return Ok(true);
    }
    Ok(false)
}

/// Retries [`split_cluster`] with a shrinking `min_size` until it succeeds or
/// a split at 2 fails. Returns the sizes attempted and whether any split took.
pub fn forced_split(
    state: &mut WorkState<'_>,
    mother: usize,
    min_size: usize,
) -> Result<(Vec<usize>, bool), IpcError> {
    let mut size = min_size.max(2);
    let mut trace = Vec::new();
    loop {
        trace.push(size);
        if split_cluster(state, mother, size, Provenance::ForcedSplit)? {
            return Ok((trace, true));
        }
        if size <= 2 {
            break;
        }
        size = relax(size);
    }
    state.worklist.retain(|&id| id != mother);
    let n = state.cluster(mother).map_or(0, |c| c.members.len());
    state
        .diagnostics
        .push(format!("cluster {mother} ({n} points) is unsplittable"));
    state.steps += 1;
    Ok((trace, false))
}

pub fn relax(min_size: usize) -> usize {
    ((min_size as f64 * RELAX_FACTOR).floor() as usize).max(2)
}

/// K-Means over the outliers with `k_needed` centroids; each centroid's
/// nearest unused outlier becomes a representative.
pub fn cluster_outliers<R: Rng + ?Sized>(
    state: &mut WorkState<'_>,
    k_needed: usize,
    rng: &mut R,
) -> Result<(), IpcError> {
    let have = state.outliers.len();
    if k_needed == 0 || have < k_needed {
        return Err(IpcError::InsufficientOutliers {
            have,
            need: k_needed,
        });
    }
    let x = state.points.select_rows(&state.outliers);
    let seeds = match kmeans::kmeans_plus_plus(&x, k_needed, rng) {
        Ok(s) => s,
        // Fewer distinct outlier positions than needed.
        Err(KMeansError::TooFewPoints { n, .. }) => {
            return Err(IpcError::InsufficientOutliers { have: n, need: k_needed })
        }
        Err(e) => return Err(e.into()),
    };
    let outcome = kmeans::kmeans(
        &x,
        k_needed,
        &seeds,
        kmeans::DEFAULT_MAX_ITER,
        kmeans::DEFAULT_TOL,
    )?;
    let mut taken = vec![false; have];
    let outliers = std::mem::take(&mut state.outliers);
    for k in 0..k_needed {
        let r = kmeans::nearest_real_point(outcome.centroids.row(k), &x, &taken)?;
        taken[r] = true;
        let rows: Vec<usize> = outcome.members(k).iter().map(|&i| outliers[i]).collect();
        state.push_cluster(rows, outliers[r], Provenance::Outlier);
    }
    state.steps += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpcParams {
    pub ipc: usize,
    pub min_cluster_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Exactly `ipc` selections in canonical order.
    pub selections: Vec<Selection>,
    pub steps: usize,
    /// Upper bound on `steps` for this run.
    pub step_bound: usize,
    pub diagnostics: Vec<String>,
}

/// Grows or trims the representative set of one class to exactly `ipc`.
pub fn match_ipc<R: Rng + ?Sized>(
    points: &Matrix,
    result: &ClusterResult,
    params: IpcParams,
    rng: &mut R,
) -> Result<MatchOutcome, IpcError> {
    let ipc = params.ipc;
    let mcs = params.min_cluster_size;
    if ipc == 0 {
        return Err(IpcError::ZeroIpc);
    }
    if points.rows() < ipc {
        return Err(IpcError::TooFewPoints {
            n: points.rows(),
            ipc,
        });
    }
    let mut state = WorkState::new(points, result)?;
    if state.len() >= ipc {
        truncate_to_ipc(&mut state, ipc);
    } else {
        state.rebuild_worklist(mcs);
        while state.len() < ipc {
            let Some(mother) = state.pop_largest() else {
                break;
            };
            split_cluster(&mut state, mother, mcs, Provenance::Split)?;
        }
        if state.len() < ipc {
            let k_needed = ipc - state.len();
            let strategy2 = if state.outliers.len() >= k_needed {
                match cluster_outliers(&mut state, k_needed, rng) {
                    Ok(()) => true,
                    Err(IpcError::InsufficientOutliers { have, need }) => {
                        state.diagnostics.push(format!(
                            "{have} distinct outliers cannot supply {need} representatives"
                        ));
                        false
                    }
                    Err(e) => return Err(e),
                }
            } else {
                false
            };
            if !strategy2 {
                state.rebuild_worklist(mcs);
                while state.len() < ipc {
                    if let Some(mother) = state.pop_largest() {
                        forced_split(&mut state, mother, mcs)?;
                    } else if !kmeans_split(&mut state, rng)? {
                        return Err(IpcError::CannotReachIpc {
                            have: state.len(),
                            need: ipc,
                            diagnostics: state.diagnostics,
                        });
                    }
                }
            }
        }
    }
    let step_bound = 2 * ipc + state.created;
    debug_assert!(state.steps <= step_bound);
    let selections = state.selections();
    debug_assert_eq!(selections.len(), ipc);
    Ok(MatchOutcome {
        selections,
        steps: state.steps,
        step_bound,
        diagnostics: state.diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeEntry {
    pub sample_id: String,
    /// Row in the full embedding set.
    pub row: usize,
    /// Vector in the original (unreduced) space.
    pub latent: Vec<f32>,
    pub provenance: Provenance,
    pub source_cluster_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRepresentatives {
    pub class: ClassId,
    pub ipc: usize,
    pub entries: Vec<RepresentativeEntry>,
    pub initial: ClusterReport,
    pub steps: usize,
    pub diagnostics: Vec<String>,
}

impl ClassRepresentatives {
    pub fn counts(&self) -> BTreeMap<Provenance, usize> {
        let mut m: BTreeMap<Provenance, usize> = Provenance::ALL.iter().map(|&p| (p, 0)).collect();
        for e in &self.entries {
            *m.get_mut(&e.provenance).expect("all variants present") += 1;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub classes: Vec<ClassRepresentatives>,
}

impl RepresentativeSet {
    pub fn class(&self, class: ClassId) -> Option<&ClassRepresentatives> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.entries.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryParams {
    pub ipc: usize,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub preprocess: Preprocess,
}

/// Reduction, clustering and IPC matching for one class.
pub fn discover_class<R: Rng + ?Sized>(
    view: &ClassView<'_>,
    params: DiscoveryParams,
    rng: &mut R,
) -> Result<ClassRepresentatives, IpcError> {
    if view.len() < params.ipc {
        return Err(IpcError::TooFewPoints {
            n: view.len(),
            ipc: params.ipc,
        });
    }
    let x = view.to_matrix();
    let reduced = preprocess::apply(params.preprocess, &x)?;
    let hparams = HdbscanParams::new(params.min_cluster_size, params.min_samples);
    let result = match hdbscan::hdbscan(&reduced, hparams) {
        Ok(r) => r,
        Err(HdbscanError::TooFewPoints { .. }) => ClusterResult::all_outliers(view.len(), hparams),
        Err(e) => return Err(e.into()),
    };
    let outcome = match_ipc(
        &reduced,
        &result,
        IpcParams {
            ipc: params.ipc,
            min_cluster_size: params.min_cluster_size,
        },
        rng,
    )?;
    let set = view.set();
    let entries = outcome
        .selections
        .iter()
        .map(|s| {
            let row = view.rows()[s.local];
            RepresentativeEntry {
                sample_id: set.sample_ids()[row].clone(),
                row,
                latent: set.row(row).to_vec(),
                provenance: s.provenance,
                source_cluster_size: s.cluster_size,
            }
        })
        .collect();
    Ok(ClassRepresentatives {
        class: view.class(),
        ipc: params.ipc,
        entries,
        initial: result.report(),
        steps: outcome.steps,
        diagnostics: outcome.diagnostics,
    })
}

/// Provenance fractions of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFractions {
    pub min_cluster_size: usize,
    pub init_cluster: f64,
    pub split: f64,
    pub outlier: f64,
    pub forced_split: f64,
}

impl SourceFractions {
    pub fn get(&self, p: Provenance) -> f64 {
        match p {
            Provenance::InitCluster => self.init_cluster,
            Provenance::Split => self.split,
            Provenance::Outlier => self.outlier,
            Provenance::ForcedSplit => self.forced_split,
        }
    }

    pub fn sum(&self) -> f64 {
        self.init_cluster + self.split + self.outlier + self.forced_split
    }
}

/// Provenance fractions pooled over all classes, one row per grid point.
pub fn source_report(sets: &[(usize, &RepresentativeSet)]) -> Vec<SourceFractions> {
    sets.iter()
        .map(|&(mcs, set)| {
            let mut counts = [0usize; 4];
            for c in &set.classes {
                for e in &c.entries {
                    counts[e.provenance as usize] += 1;
                }
            }
            let total = counts.iter().sum::<usize>().max(1) as f64;
            SourceFractions {
                min_cluster_size: mcs,
                init_cluster: counts[0] as f64 / total,
                split: counts[1] as f64 / total,
                outlier: counts[2] as f64 / total,
                forced_split: counts[3] as f64 / total,
            }
        })
        .collect()
}
