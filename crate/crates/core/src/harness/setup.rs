use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PartitionSpec};
use crate::error::{Error, Result};
use crate::evaluation::{build_folds, FoldPlan};
use crate::rng::derive_seed;
use crate::tasks::{
    challenge_profile, generate_pool, limited_profile, partition_iid, partition_profile, power_law_profile,
    required_group_counts, shift_features, ClientDataset, ProfileEntry, Sample, TaskKind, TaskModel,
};

/// One institution's data for the selected fold.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: usize,
    /// Position in the federation, used for per-client seeds.
    pub slot: usize,
    pub train: ClientDataset<f64>,
    pub val: ClientDataset<f64>,
    pub test: ClientDataset<f64>,
}

/// The whole federation before fold splitting.
#[derive(Debug, Clone)]
pub struct Federation {
    pub task: TaskModel,
    pub clients: Vec<ClientDataset<f64>>,
    pub plan: FoldPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub samples: usize,
    pub per_group: Vec<usize>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn profile_for(spec: &PartitionSpec) -> Result<Option<Vec<ProfileEntry>>> {
    Ok(match spec {
        PartitionSpec::Iid { .. } => None,
        PartitionSpec::Profile { entries } => Some(entries.clone()),
        PartitionSpec::Challenge => Some(challenge_profile()),
        PartitionSpec::Limited => Some(limited_profile()),
        PartitionSpec::PowerLaw {
            clients,
            largest,
            smallest,
            exponent,
            groups,
        } => {
            if *groups == 0 {
                return Err(Error::Config("power_law groups must be at least 1".into()));
            }
            let base = power_law_profile(*clients, *largest, *smallest, *exponent)
                .map_err(|e| Error::Config(e.to_string()))?;
            let entries = base
                .into_iter()
                .map(|e| {
                    let mut mix = vec![0.0; *groups];
                    mix[(e.client_id - 1) % groups] = 1.0;
                    ProfileEntry::mixed(e.client_id, e.count, mix)
                })
                .collect();
            Some(entries)
        }
    })
}

/// Largest-remainder split of `total` by `mix`.
fn group_counts(total: usize, mix: &[f64]) -> Result<Vec<usize>> {
    let probe = ProfileEntry::mixed(0, total, mix.to_vec());
    required_group_counts(std::slice::from_ref(&probe), mix.len()).map_err(|e| Error::Config(e.to_string()))
}

fn feature_offset_len(kind: &TaskKind) -> usize {
    match kind {
        TaskKind::VoxelDice { channels, .. } => *channels,
        TaskKind::LinearRegression { inputs, .. } | TaskKind::LogisticRegression { inputs } => *inputs,
        TaskKind::Mlp1Hidden { inputs, .. } => *inputs,
    }
}

/// Pool generation, partitioning, feature shift and fold plan.
pub fn build_federation(cfg: &ExperimentConfig) -> Result<Federation> {
    let task = TaskModel::new(cfg.task.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let data_seed = derive_seed(cfg.seed, "data", &[]);
    let mut clients = match profile_for(&cfg.data.partition)? {
        None => {
            let PartitionSpec::Iid {
                clients,
                samples,
                group_mix,
            } = &cfg.data.partition
            else {
                unreachable!("only iid has no profile")
            };
            let counts = match group_mix {
                Some(mix) => group_counts(*samples, mix)?,
                None => vec![*samples],
            };
            let pool: Vec<Sample<f64>> = generate_pool(&task, &counts, &cfg.data.synth, data_seed)?;
            partition_iid(&pool, *clients, derive_seed(data_seed, "partition", &[]))
                .map_err(|e| Error::Config(e.to_string()))?
        }
        Some(profile) => {
            let groups = profile
                .iter()
                .filter_map(|e| e.mix.as_ref().map(Vec::len))
                .max()
                .unwrap_or(1);
            let counts = required_group_counts(&profile, groups).map_err(|e| Error::Config(e.to_string()))?;
            let pool: Vec<Sample<f64>> = generate_pool(&task, &counts, &cfg.data.synth, data_seed)?;
            partition_profile(&pool, &profile, derive_seed(data_seed, "partition", &[]))
                .map_err(|e| Error::Config(e.to_string()))?
        }
    };
    if cfg.data.feature_shift != 0.0 {
        let k = clients.len() as f64;
        let len = feature_offset_len(&cfg.task);
        for (slot, c) in clients.iter_mut().enumerate() {
            let offset = vec![cfg.data.feature_shift * slot as f64 / k; len];
            shift_features(c, &offset)?;
        }
    }
    let plan = build_folds(
        &clients,
        cfg.folds.n_folds,
        cfg.folds.val_frac,
        derive_seed(cfg.seed, "folds", &[]),
    )
    .map_err(|e| Error::Config(e.to_string()))?;
    Ok(Federation { task, clients, plan })
}

impl Federation {
    /// Train/val/test datasets of every client for `fold`. Every client needs
    /// at least one training and one validation sample.
    pub fn fold_data(&self, fold: usize) -> Result<Vec<ClientData>> {
        let splits = self.plan.split(fold).map_err(|e| Error::Config(e.to_string()))?;
        splits
            .iter()
            .zip(&self.clients)
            .enumerate()
            .map(|(slot, (s, data))| {
                let [train, val, test] = s.materialize(data);
                if train.is_empty() || val.is_empty() {
                    return Err(Error::Config(format!(
                        "client {} has {} training and {} validation samples in fold {fold}; \
                         every client needs both",
                        s.client_id,
                        train.len(),
                        val.len()
                    )));
                }
                Ok(ClientData {
                    client_id: s.client_id,
                    slot,
                    train,
                    val,
                    test,
                })
            })
            .collect()
    }

    pub fn summary(&self, fold: usize) -> Result<Vec<ClientSummary>> {
        let groups = self
            .clients
            .iter()
            .flat_map(|c| c.samples.iter().map(|s| s.group + 1))
            .max()
            .unwrap_or(1);
        let splits = self.plan.split(fold)?;
        Ok(self
            .clients
            .iter()
            .zip(splits)
            .map(|(c, s)| {
                let mut per_group = vec![0; groups];
                for smp in &c.samples {
                    per_group[smp.group] += 1;
                }
                ClientSummary {
                    client_id: c.client_id,
                    samples: c.len(),
                    per_group,
                    train: s.train.len(),
                    val: s.val.len(),
                    test: s.test.len(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(partition: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"task": {{"kind": "logistic_regression", "inputs": 3}}, "algorithm": {{"name": "fedavg_fixed_epochs"}}, "data": {{"partition": {partition}}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn challenge_layout() {
        let fed = build_federation(&cfg(r#"{"kind": "challenge"}"#)).unwrap();
        assert_eq!(fed.clients.len(), 23);
        assert_eq!(fed.clients.iter().map(|c| c.len()).sum::<usize>(), 1251);
        let s = fed.summary(0).unwrap();
        assert_eq!(s[0].samples, 511);
        assert_eq!((s[0].train, s[0].val, s[0].test), (326, 82, 103));
        assert_eq!(s[12].per_group, vec![0, 10]);
    }

    #[test]
    fn iid_and_power_law() {
        let fed = build_federation(&cfg(
            r#"{"kind": "iid", "clients": 4, "samples": 40, "group_mix": [0.5, 0.5]}"#,
        ))
        .unwrap();
        assert!(fed.clients.iter().all(|c| c.len() == 10));
        let fed = build_federation(&cfg(
            r#"{"kind": "power_law", "clients": 5, "largest": 60, "smallest": 6, "exponent": 1.0, "groups": 2}"#,
        ))
        .unwrap();
        assert_eq!(fed.clients[0].len(), 60);
        assert!(fed.clients[1].samples.iter().all(|s| s.group == 1));
        let data = fed.fold_data(2).unwrap();
        assert_eq!(data.len(), 5);
    }

    #[test]
    fn tiny_clients_rejected_per_fold() {
        let fed = build_federation(&cfg(
            r#"{"kind": "profile", "entries": [{"client_id": 1, "count": 10}, {"client_id": 2, "count": 2}]}"#,
        ))
        .unwrap();
        let err = fed.fold_data(0).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("client 2"));
    }

    #[test]
    fn feature_shift_moves_inputs() {
        let mut c = cfg(r#"{"kind": "iid", "clients": 2, "samples": 20}"#);
        let a = build_federation(&c).unwrap();
        c.data.feature_shift = 1.0;
        let b = build_federation(&c).unwrap();
        assert_eq!(a.clients[0].samples[0].x, b.clients[0].samples[0].x);
        let (xa, xb) = (&a.clients[1].samples[0].x, &b.clients[1].samples[0].x);
        assert!((xb[0] - xa[0] - 0.5).abs() < 1e-12);
    }
}
