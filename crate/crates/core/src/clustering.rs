//! Clustered federated learning: scheduled similarity splits and prior-label clusters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggregation::{fedavg_step, AveragingMode};
use crate::error::{Error, Result};
use crate::param::{cosine_similarity, ParamVec, UpdateSet};
use crate::scalar::Scalar;

/// Largest cluster the exhaustive bipartition search accepts.
pub const MAX_BIPARTITION_MEMBERS: usize = 24;

/// Pairwise cosine similarities of the updates, indexed like `u.updates()`.
pub fn similarity_matrix<T: Scalar>(u: &UpdateSet<T>) -> Result<Vec<Vec<T>>> {
    let ups = u.updates();
    if ups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "similarity needs at least 2 members, got {}",
            ups.len()
        )));
    }
    for up in ups {
        if up.delta.norm() == T::zero() {
            return Err(Error::ZeroNorm(format!("update of client {}", up.client_id)));
        }
    }
    let n = ups.len();
    let mut a = vec![vec![T::one(); n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = cosine_similarity(&ups[i].delta, &ups[j].delta)?;
            a[i][j] = c;
            a[j][i] = c;
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bipartition<T> {
    /// The smaller side (by size, then by smallest id).
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub max_cross: T,
}

/// Split minimizing the largest cross-side similarity, searched exhaustively.
/// Ties go to the smaller first side, then to the lexicographically smallest
/// id list for that side.
pub fn optimal_bipartition<T: Scalar>(matrix: &[Vec<T>], members: &[usize]) -> Result<Bipartition<T>> {
    let n = members.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split a cluster of {n} member(s)"
        )));
    }
    if n > MAX_BIPARTITION_MEMBERS {
        return Err(Error::InvalidArgument(format!(
            "cluster of {n} members exceeds the exhaustive split bound of {MAX_BIPARTITION_MEMBERS}; \
             split it earlier or reduce the federation size"
        )));
    }
    if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch {
            index: 0,
            expected: n,
            found: matrix.len(),
        });
    }
    let unique: BTreeSet<_> = members.iter().collect();
    if unique.len() != n {
        return Err(Error::InvalidArgument("duplicate cluster member ids".into()));
    }

    // Bit i set means members[i] sits on the side not holding members[0].
    let full: u32 = (1u32 << n) - 1;
    let mut best: Option<(T, Vec<usize>, u32)> = None;
    for mask in 1..(1u32 << (n - 1)) {
        let mask = mask << 1;
        let mut cross = T::neg_infinity();
        let mut pruned = false;
        'outer: for i in 0..n {
            if mask & (1 << i) != 0 {
                continue;
            }
            for j in 0..n {
                if mask & (1 << j) != 0 && matrix[i][j] > cross {
                    cross = matrix[i][j];
                    if let Some((b, _, _)) = &best {
                        if cross > *b {
                            pruned = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
        if pruned {
            continue;
        }
        let key = first_side(members, mask, full);
        let better = match &best {
            None => true,
            Some((b, k, _)) => cross < *b || (cross == *b && (key.len(), &key) < (k.len(), k)),
        };
        if better {
            best = Some((cross, key, mask));
        }
    }
    let (max_cross, first, mask) = best.expect("n ≥ 2 leaves at least one bipartition");
    let first_set: BTreeSet<usize> = first.iter().copied().collect();
    let mut second: Vec<usize> = members.iter().copied().filter(|m| !first_set.contains(m)).collect();
    second.sort_unstable();
    debug_assert_eq!(first.len() + second.len(), n, "mask {mask:b}");
    Ok(Bipartition {
        first,
        second,
        max_cross,
    })
}

fn first_side(members: &[usize], mask: u32, full: u32) -> Vec<usize> {
    let side = |m: u32| {
        let mut v: Vec<usize> = (0..members.len())
            .filter(|i| m & (1 << i) != 0)
            .map(|i| members[i])
            .collect();
        v.sort_unstable();
        v
    };
    let a = side(mask);
    let b = side(full & !mask);
    if (a.len(), &a) <= (b.len(), &b) {
        a
    } else {
        b
    }
}

/// `γ_max = √((1 − max a)/2)` for a split's largest cross similarity.
pub fn gamma_max<T: Scalar>(max_cross: T) -> T {
    ((T::one() - max_cross) / T::lit(2.0)).max(T::zero()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Similarity,
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster<T> {
    pub id: usize,
    pub members: Vec<usize>,
    pub params: ParamVec<T>,
    pub label: Option<String>,
}

/// One split, kept for the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub round: usize,
    pub parent: usize,
    pub children: [usize; 2],
    pub members: [Vec<usize>; 2],
    pub max_cross_similarity: f64,
    pub gamma_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState<T> {
    pub clusters: Vec<Cluster<T>>,
    pub schedule: BTreeMap<usize, Vec<usize>>,
    pub provenance: Provenance,
    pub history: Vec<SplitEvent>,
    next_id: usize,
}

impl<T: Scalar> ClusterState<T> {
    /// Everyone in cluster 0.
    pub fn root(members: &[usize], params: ParamVec<T>, schedule: BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let mut members = members.to_vec();
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::Empty("cluster members".into()));
        }
        Ok(Self {
            clusters: vec![Cluster {
                id: 0,
                members,
                params,
                label: None,
            }],
            schedule,
            provenance: Provenance::Similarity,
            history: Vec::new(),
            next_id: 1,
        })
    }

    pub fn cluster(&self, id: usize) -> Option<&Cluster<T>> {
        self.clusters.iter().find(|c| c.id == id)
    }

    pub fn cluster_of(&self, client: usize) -> Option<&Cluster<T>> {
        self.clusters.iter().find(|c| c.members.contains(&client))
    }

    /// Every client id, ascending.
    pub fn all_members(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.clusters.iter().flat_map(|c| c.members.iter().copied()).collect();
        v.sort_unstable();
        v
    }
}

/// Aggregation weights `n_k / Σ_{j∈C} n_j` for the members of one cluster.
pub fn cluster_weights<T: Scalar>(members: &[usize], sizes: &BTreeMap<usize, usize>) -> Result<Vec<T>> {
    let counts = members
        .iter()
        .map(|m| {
            sizes
                .get(m)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no sample count for client {m}")))
        })
        .collect::<Result<Vec<_>>>()?;
    crate::param::size_weights(&counts)
}

/// One round: FedAvg inside every cluster, then any split scheduled for `round`.
/// `updates` maps cluster id to that cluster's update set.
pub fn scheduled_cfl_round<T: Scalar>(
    state: &ClusterState<T>,
    round: usize,
    updates: &BTreeMap<usize, UpdateSet<T>>,
) -> Result<ClusterState<T>> {
    let scheduled: &[usize] = state.schedule.get(&round).map(Vec::as_slice).unwrap_or(&[]);
    for id in scheduled {
        let c = state
            .cluster(*id)
            .ok_or_else(|| Error::InvalidArgument(format!("round {round} schedules unknown cluster {id}")))?;
        if c.members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "round {round} schedules a split of singleton cluster {id}"
            )));
        }
    }
    let mut next = state.clone();
    next.clusters.clear();
    for c in &state.clusters {
        let u = updates
            .get(&c.id)
            .ok_or_else(|| Error::InvalidArgument(format!("no updates for cluster {}", c.id)))?;
        if u.client_ids() != c.members {
            return Err(Error::InvalidArgument(format!(
                "updates for cluster {} come from {:?}, members are {:?}",
                c.id,
                u.client_ids(),
                c.members
            )));
        }
        let params = fedavg_step(&c.params, u, AveragingMode::Weighted)?;
        if scheduled.contains(&c.id) {
            let a = similarity_matrix(u)?;
            let split = optimal_bipartition(&a, &c.members)?;
            let ids = [next.next_id, next.next_id + 1];
            next.next_id += 2;
            next.history.push(SplitEvent {
                round,
                parent: c.id,
                children: ids,
                members: [split.first.clone(), split.second.clone()],
                max_cross_similarity: split.max_cross.as_f64(),
                gamma_max: gamma_max(split.max_cross).as_f64(),
            });
            for (id, members) in ids.into_iter().zip([split.first, split.second]) {
                next.clusters.push(Cluster {
                    id,
                    members,
                    params: params.clone(),
                    label: c.label.clone(),
                });
            }
        } else {
            next.clusters.push(Cluster { params, ..c.clone() });
        }
    }
    Ok(next)
}

/// Clusters from known labels, each starting at `w_start`. Cluster ids follow
/// label order. The federated finetuning rounds are driven by the caller with
/// [`scheduled_cfl_round`] and an empty schedule.
pub fn prior_clusters<T: Scalar>(
    assignment: &BTreeMap<usize, String>,
    w_start: &ParamVec<T>,
) -> Result<ClusterState<T>> {
    if assignment.is_empty() {
        return Err(Error::Empty("cluster assignment".into()));
    }
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (client, label) in assignment {
        if label.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {client} has an empty cluster label"
            )));
        }
        by_label.entry(label.as_str()).or_default().push(*client);
    }
    let clusters: Vec<Cluster<T>> = by_label
        .into_iter()
        .enumerate()
        .map(|(id, (label, members))| Cluster {
            id,
            members,
            params: w_start.clone(),
            label: Some(label.to_string()),
        })
        .collect();
    let next_id = clusters.len();
    Ok(ClusterState {
        clusters,
        schedule: BTreeMap::new(),
        provenance: Provenance::Prior,
        history: Vec::new(),
        next_id,
    })
}
