use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::tasks::ClientDataset;

/// One client's local folds, as positions into its dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientFolds {
    pub client_id: usize,
    pub folds: Vec<Vec<usize>>,
    /// Shuffled order the folds were sliced from.
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub val_frac: f64,
    pub seed: u64,
    pub clients: Vec<ClientFolds>,
}

/// Positions into one client's dataset for a given global fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-client seeded shuffle sliced into `n_folds` contiguous folds whose sizes
/// differ by at most one (the first folds take the remainder).
pub fn build_folds<T>(partition: &[ClientDataset<T>], n_folds: usize, val_frac: f64, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {n_folds}")));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must be in [0, 1), got {val_frac}"
        )));
    }
    let mut clients = Vec::with_capacity(partition.len());
    for c in partition {
        let n = c.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "client {} has {n} sample(s); at least 2 are needed for a test and a validation split",
                c.client_id
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(seed, "folds", &[c.client_id as u64]));
        let (base, extra) = (n / n_folds, n % n_folds);
        let mut folds = Vec::with_capacity(n_folds);
        let mut start = 0;
        for f in 0..n_folds {
            let len = base + usize::from(f < extra);
            folds.push(order[start..start + len].to_vec());
            start += len;
        }
        clients.push(ClientFolds {
            client_id: c.client_id,
            folds,
            order,
        });
    }
    Ok(FoldPlan {
        n_folds,
        val_frac,
        seed,
        clients,
    })
}

impl FoldPlan {
    /// Validation count for `remaining` non-test samples: `max(1, round_half_up(frac·remaining))`.
    pub fn val_count(&self, remaining: usize) -> usize {
        ((self.val_frac * remaining as f64 + 0.5).floor() as usize).clamp(1, remaining.max(1))
    }

    /// Local fold `fold` is the test set; the rest (in shuffled order) is split
    /// into train followed by validation.
    pub fn split(&self, fold: usize) -> Result<Vec<ClientSplit>> {
        if fold >= self.n_folds {
            return Err(Error::InvalidArgument(format!(
                "fold {fold} out of range for {} folds",
                self.n_folds
            )));
        }
        Ok(self
            .clients
            .iter()
            .map(|c| {
                let test = c.folds[fold].clone();
                let rest: Vec<usize> = c
                    .folds
                    .iter()
                    .enumerate()
                    .filter(|(f, _)| *f != fold)
                    .flat_map(|(_, v)| v.iter().copied())
                    .collect();
                let n_val = if rest.is_empty() { 0 } else { self.val_count(rest.len()) };
                let cut = rest.len() - n_val;
                ClientSplit {
                    client_id: c.client_id,
                    train: rest[..cut].to_vec(),
                    val: rest[cut..].to_vec(),
                    test,
                }
            })
            .collect())
    }

    /// Number of test samples in global fold `fold`.
    pub fn test_size(&self, fold: usize) -> usize {
        self.clients.iter().map(|c| c.folds.get(fold).map_or(0, Vec::len)).sum()
    }
}

impl ClientSplit {
    /// The three subsets as datasets, in the order stored here.
    pub fn materialize<T: Clone>(&self, data: &ClientDataset<T>) -> [ClientDataset<T>; 3] {
        let pick =
            |idx: &[usize]| ClientDataset::new(data.client_id, idx.iter().map(|&i| data.samples[i].clone()).collect());
        [pick(&self.train), pick(&self.val), pick(&self.test)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Sample;
    use proptest::prelude::*;

    fn client(id: usize, n: usize) -> ClientDataset<f64> {
        ClientDataset::new(
            id,
            (0..n)
                .map(|i| Sample {
                    id: 1000 * id + i,
                    group: 0,
                    x: vec![],
                    y: vec![],
                })
                .collect(),
        )
    }

    #[test]
    fn ten_samples() {
        let plan = build_folds(&[client(1, 10)], 5, 0.2, 3).unwrap();
        assert!(plan.clients[0].folds.iter().all(|f| f.len() == 2));
        for s in plan.split(0).unwrap() {
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        }
    }

    #[test]
    fn global_fold_sizes() {
        let plan = build_folds(&[client(1, 10), client(2, 5)], 5, 0.2, 3).unwrap();
        for f in 0..5 {
            assert_eq!(plan.test_size(f), 3);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let data = [client(1, 17), client(2, 9)];
        assert_eq!(
            build_folds(&data, 5, 0.2, 1).unwrap(),
            build_folds(&data, 5, 0.2, 1).unwrap()
        );
        assert_ne!(
            build_folds(&data, 5, 0.2, 1).unwrap(),
            build_folds(&data, 5, 0.2, 2).unwrap()
        );
    }

    #[test]
    fn tiny_clients() {
        assert!(build_folds(&[client(1, 1)], 5, 0.2, 0).is_err());
        let plan = build_folds(&[client(1, 4)], 5, 0.2, 0).unwrap();
        let s = &plan.split(0).unwrap()[0];
        // 3 remaining: round(0.6) = 1
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2, 1, 1));
        assert!(plan.split(5).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_each_client(sizes in proptest::collection::vec(2usize..40, 1..6), seed in any::<u64>()) {
            let data: Vec<_> = sizes.iter().enumerate().map(|(i, &n)| client(i + 1, n)).collect();
            let plan = build_folds(&data, 5, 0.2, seed).unwrap();
            for (c, &n) in plan.clients.iter().zip(&sizes) {
                let mut all: Vec<usize> = c.folds.concat();
                all.sort();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                let lens: Vec<usize> = c.folds.iter().map(Vec::len).collect();
                prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
            }
            for f in 0..5 {
                for s in plan.split(f).unwrap() {
                    let mut all = [s.train.clone(), s.val.clone(), s.test.clone()].concat();
                    all.sort();
                    let n = sizes[s.client_id - 1];
                    prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                }
            }
        }
    }
}
