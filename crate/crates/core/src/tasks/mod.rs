//! Synthetic differentiable tasks and the data partitioners that build
//! federations out of them.

mod dice;
mod model;
mod partition;
mod synth;

pub use dice::soft_dice_loss;
pub use model::{Objective, TaskKind, TaskModel};
pub use partition::{
    challenge_profile, limited_profile, partition_iid, partition_profile, power_law_profile, required_group_counts,
    ProfileEntry,
};
pub use synth::{generate_pool, shift_features, SynthSettings};

use serde::{Deserialize, Serialize};

/// One training example. `group` is the latent class used by the label-mix
/// knobs (group 0 and 1 play the roles of high- and low-grade tumours).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample<T> {
    pub id: usize,
    pub group: usize,
    pub x: Vec<T>,
    pub y: Vec<T>,
}

/// Local dataset `D_k` of one institution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset<T> {
    pub client_id: usize,
    pub samples: Vec<Sample<T>>,
}

impl<T> ClientDataset<T> {
    pub fn new(client_id: usize, samples: Vec<Sample<T>>) -> Self {
        Self { client_id, samples }
    }

    /// `n_k`
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn refs(&self) -> Vec<&Sample<T>> {
        self.samples.iter().collect()
    }
}
