use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Random balanced repartition of `pool` over `clients` institutions (ids
/// `1..=clients`). Sizes differ by at most one; the extra samples go to the
/// lowest ids.
pub fn partition_iid<T: Clone>(pool: &[Sample<T>], clients: usize, seed: u64) -> Result<Vec<ClientDataset<T>>> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if pool.is_empty() {
        return Err(Error::Empty("sample pool".into()));
    }
    if clients > pool.len() {
        return Err(Error::Partition(format!(
            "{} clients requested for {} samples",
            clients,
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng::derived_rng(seed, "partition_iid", &[]));
    let mut out: Vec<ClientDataset<T>> = (1..=clients).map(|id| ClientDataset::new(id, Vec::new())).collect();
    for (pos, &idx) in order.iter().enumerate() {
        out[pos % clients].samples.push(pool[idx].clone());
    }
    Ok(out)
}

/// One row of a partition profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub client_id: usize,
    pub count: usize,
    /// Fraction of samples drawn from each group. `None` draws from whatever
    /// remains in the pool.
    #[serde(default)]
    pub mix: Option<Vec<f64>>,
}

impl ProfileEntry {
    pub fn any(client_id: usize, count: usize) -> Self {
        Self {
            client_id,
            count,
            mix: None,
        }
    }

    pub fn mixed(client_id: usize, count: usize, mix: Vec<f64>) -> Self {
        Self {
            client_id,
            count,
            mix: Some(mix),
        }
    }

    /// Per-group sample counts by largest remainder (ties to the lower group).
    fn quotas(&self) -> Option<Vec<usize>> {
        let mix = self.mix.as_ref()?;
        let raw: Vec<f64> = mix.iter().map(|f| f * self.count as f64).collect();
        let mut q: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut left = self.count - q.iter().sum::<usize>().min(self.count);
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &g in order.iter().cycle().take(order.len() * 2) {
            if left == 0 {
                break;
            }
            if mix[g] > 0.0 {
                q[g] += 1;
                left -= 1;
            }
        }
        Some(q)
    }
}

fn validate_profile(profile: &[ProfileEntry]) -> Result<()> {
    if profile.is_empty() {
        return Err(Error::Empty("partition profile".into()));
    }
    let mut ids = BTreeSet::new();
    for e in profile {
        if !ids.insert(e.client_id) {
            return Err(Error::Partition(format!("client {} listed twice", e.client_id)));
        }
        if e.count == 0 {
            return Err(Error::Partition(format!("client {} has zero samples", e.client_id)));
        }
        if let Some(mix) = &e.mix {
            let total: f64 = mix.iter().sum();
            if mix.is_empty() || mix.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Partition(format!(
                    "client {} has an invalid class mix {:?}",
                    e.client_id, mix
                )));
            }
        }
    }
    Ok(())
}

/// Pool composition needed to satisfy `profile`: explicit mixes per group, the
/// free-draw clients counted in group 0.
pub fn required_group_counts(profile: &[ProfileEntry], groups: usize) -> Result<Vec<usize>> {
    validate_profile(profile)?;
    let mut counts = vec![0; groups.max(1)];
    for e in profile {
        match e.quotas() {
            Some(q) => {
                if q.len() > counts.len() {
                    counts.resize(q.len(), 0);
                }
                for (g, n) in q.into_iter().enumerate() {
                    counts[g] += n;
                }
            }
            None => counts[0] += e.count,
        }
    }
    Ok(counts)
}

/// Deterministic sampling without replacement honouring per-client counts and
/// class mixes. Output is sorted by client id.
pub fn partition_profile<T: Clone>(
    pool: &[Sample<T>],
    profile: &[ProfileEntry],
    seed: u64,
) -> Result<Vec<ClientDataset<T>>> {
    validate_profile(profile)?;
    if pool.is_empty() {
        return Err(Error::Empty("sample pool".into()));
    }
    let requested: usize = profile.iter().map(|e| e.count).sum();
    if requested > pool.len() {
        return Err(Error::Partition(format!(
            "profile requests {requested} samples but the pool holds {}",
            pool.len()
        )));
    }
    let n_groups = pool.iter().map(|s| s.group).max().unwrap_or(0) + 1;
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, s) in pool.iter().enumerate() {
        queues[s.group].push(i);
    }
    for (g, q) in queues.iter_mut().enumerate() {
        q.shuffle(&mut rng::derived_rng(seed, "partition_profile", &[g as u64]));
        // drawn from the back
        q.reverse();
    }

    let quotas: Vec<Option<Vec<usize>>> = profile.iter().map(ProfileEntry::quotas).collect();
    let mut demand = vec![0usize; n_groups];
    for q in quotas.iter().flatten() {
        for (g, &n) in q.iter().enumerate() {
            if n > 0 && g >= n_groups {
                return Err(Error::Partition(format!("pool has no samples of group {g}")));
            }
            if g < n_groups {
                demand[g] += n;
            }
        }
    }
    let deficits: Vec<String> = demand
        .iter()
        .enumerate()
        .filter(|(g, &d)| d > queues[*g].len())
        .map(|(g, &d)| format!("group {g}: need {d}, have {}", queues[g].len()))
        .collect();
    if !deficits.is_empty() {
        return Err(Error::Partition(deficits.join("; ")));
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); profile.len()];
    for (slot, q) in quotas.iter().enumerate() {
        if let Some(q) = q {
            for (g, &n) in q.iter().enumerate() {
                for _ in 0..n {
                    assigned[slot].push(queues[g].pop().expect("demand checked"));
                }
            }
        }
    }
    let mut rest: Vec<usize> = queues.into_iter().flatten().collect();
    rest.sort_unstable();
    rest.shuffle(&mut rng::derived_rng(seed, "partition_profile_rest", &[]));
    let mut cursor = 0;
    for (slot, e) in profile.iter().enumerate() {
        if quotas[slot].is_none() {
            assigned[slot].extend_from_slice(&rest[cursor..cursor + e.count]);
            cursor += e.count;
        }
    }

    let mut out: Vec<ClientDataset<T>> = profile
        .iter()
        .zip(assigned)
        .map(|(e, idx)| ClientDataset::new(e.client_id, idx.into_iter().map(|i| pool[i].clone()).collect()))
        .collect();
    out.sort_by_key(|d| d.client_id);
    Ok(out)
}

const HGG: [f64; 2] = [1.0, 0.0];
const LGG: [f64; 2] = [0.0, 1.0];
const BOTH: [f64; 2] = [0.5, 0.5];

fn grade_mix(id: usize) -> Vec<f64> {
    match id {
        3 | 4 | 6 => BOTH.to_vec(),
        12..=15 => LGG.to_vec(),
        _ => HGG.to_vec(),
    }
}

/// Approximate reconstruction of the 23-institution challenge partition
/// (1251 samples, two dominant institutions, most others under 15 samples).
/// Group 1 stands in for low-grade tumours.
pub fn challenge_profile() -> Vec<ProfileEntry> {
    const COUNTS: [usize; 23] = [
        511, 6, 14, 47, 16, 59, 22, 35, 4, 12, 8, 14, 10, 9, 8, 48, 10, 382, 6, 7, 9, 5, 9,
    ];
    COUNTS
        .iter()
        .enumerate()
        .map(|(i, &n)| ProfileEntry::mixed(i + 1, n, grade_mix(i + 1)))
        .collect()
}

/// Approximate reconstruction of the 18-institution limited setup: samples of
/// unknown grade dropped, institution 1 cut to 35, 278 samples in total.
pub fn limited_profile() -> Vec<ProfileEntry> {
    const ROWS: [(usize, usize); 18] = [
        (1, 35),
        (2, 6),
        (3, 14),
        (4, 35),
        (5, 16),
        (6, 35),
        (7, 14),
        (8, 35),
        (9, 4),
        (10, 12),
        (11, 8),
        (12, 14),
        (13, 10),
        (14, 9),
        (15, 8),
        (17, 10),
        (19, 6),
        (20, 7),
    ];
    ROWS.iter()
        .map(|&(id, n)| ProfileEntry::mixed(id, n, grade_mix(id)))
        .collect()
}

/// `n_i = max(min, round(largest · i^−exponent))` for ids `1..=clients`.
pub fn power_law_profile(clients: usize, largest: usize, smallest: usize, exponent: f64) -> Result<Vec<ProfileEntry>> {
    if clients == 0 || largest == 0 || smallest == 0 || smallest > largest {
        return Err(Error::InvalidArgument(
            "power-law profile needs clients ≥ 1 and 1 ≤ smallest ≤ largest".into(),
        ));
    }
    Ok((1..=clients)
        .map(|i| {
            let n = (largest as f64 * (i as f64).powf(-exponent)).round() as usize;
            ProfileEntry::any(i, n.max(smallest))
        })
        .collect())
}
