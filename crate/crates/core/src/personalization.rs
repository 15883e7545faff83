//! Local finetuning, Ditto and partial model sharing (FedPer, LG-FedAvg).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::{fedavg_step, AveragingMode};
use crate::error::{Error, Result};
use crate::param::{masked_overwrite, BlockMap, ParamVec, UpdateSet};
use crate::scalar::Scalar;
use crate::tasks::{ClientDataset, Objective};
use crate::trainer::{local_update, local_validate, Budget, Proximal, TrainerConfig};

/// Private depth used when none is configured.
pub const DEFAULT_PRIVATE_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareStrategy {
    /// Last blocks private.
    Fedper,
    /// First blocks private.
    LgFedavg,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShareMask {
    pub shared_blocks: Vec<String>,
    pub private_blocks: Vec<String>,
    pub strategy: ShareStrategy,
    pub n_private: usize,
}

impl ShareMask {
    pub fn is_shared(&self, block: &str) -> bool {
        self.shared_blocks.iter().any(|b| b == block)
    }

    /// Mask that shares every block (plain FedAvg).
    pub fn all_shared(layout: &BlockMap) -> Self {
        Self {
            shared_blocks: layout.names().map(str::to_string).collect(),
            private_blocks: Vec::new(),
            strategy: ShareStrategy::Custom,
            n_private: 0,
        }
    }

    /// Mask sharing exactly `shared` (in layout order).
    pub fn custom(layout: &BlockMap, shared: &[&str]) -> Result<Self> {
        for s in shared {
            if layout.get(s).is_none() {
                return Err(Error::UnknownBlock(s.to_string()));
            }
        }
        let (shared_blocks, private_blocks): (Vec<String>, Vec<String>) = layout
            .names()
            .map(str::to_string)
            .partition(|n| shared.contains(&n.as_str()));
        if shared_blocks.is_empty() {
            return Err(Error::InvalidArgument(
                "a federated method needs at least one shared block".into(),
            ));
        }
        let n_private = private_blocks.len();
        Ok(Self {
            shared_blocks,
            private_blocks,
            strategy: ShareStrategy::Custom,
            n_private,
        })
    }

    /// Number of floats exchanged each way per round.
    pub fn shared_len(&self, layout: &BlockMap) -> Result<usize> {
        layout.count_in(self.shared_blocks.iter().map(String::as_str))
    }
}

/// FedPer keeps the last `n_private` blocks local, LG-FedAvg the first ones.
pub fn make_share_mask<S: AsRef<str>>(blocks: &[S], strategy: ShareStrategy, n_private: usize) -> Result<ShareMask> {
    let names: Vec<String> = blocks.iter().map(|b| b.as_ref().to_string()).collect();
    if n_private == 0 || n_private >= names.len() {
        return Err(Error::InvalidArgument(format!(
            "number of private blocks must be in 1..{} for a {}-block model, got {}",
            names.len(),
            names.len(),
            n_private
        )));
    }
    let (shared_blocks, private_blocks) = match strategy {
        ShareStrategy::Fedper => {
            let cut = names.len() - n_private;
            (names[..cut].to_vec(), names[cut..].to_vec())
        }
        ShareStrategy::LgFedavg => (names[n_private..].to_vec(), names[..n_private].to_vec()),
        ShareStrategy::Custom => {
            return Err(Error::InvalidArgument(
                "custom masks are built from an explicit block list".into(),
            ))
        }
    };
    Ok(ShareMask {
        shared_blocks,
        private_blocks,
        strategy,
        n_private,
    })
}

/// Restricts an update to the shared blocks (private entries zeroed).
pub fn shared_part<T: Scalar>(delta: &ParamVec<T>, mask: &ShareMask) -> Result<ParamVec<T>> {
    masked_overwrite(&delta.zeros_like(), delta, &mask.shared_blocks)
}

/// Per-client models keyed by client id.
pub type Privates<T> = BTreeMap<usize, ParamVec<T>>;

/// Server half of a partial-sharing round: FedAvg over the shared entries,
/// every client's private entries returned untouched.
pub fn partial_round<T: Scalar>(
    global: &ParamVec<T>,
    privates: &BTreeMap<usize, ParamVec<T>>,
    u: &UpdateSet<T>,
    mask: &ShareMask,
) -> Result<(ParamVec<T>, Privates<T>)> {
    for upd in u.updates() {
        for name in &mask.private_blocks {
            if upd.delta.block(name)?.iter().any(|v| *v != T::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "client {} sent a nonzero update for private block `{name}`",
                    upd.client_id
                )));
            }
        }
    }
    let aggregated = fedavg_step(global, u, AveragingMode::Weighted)?;
    let next = masked_overwrite(global, &aggregated, &mask.shared_blocks)?;
    Ok((next, privates.clone()))
}

/// Best-validation checkpoint of a finetuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct Finetuned<T> {
    pub best: ParamVec<T>,
    /// Epoch of the checkpoint, 0 being the starting point.
    pub best_epoch: usize,
    pub best_val_loss: T,
    pub last: ParamVec<T>,
    pub last_val_loss: T,
    pub steps: usize,
    /// Summed validation loss after each epoch.
    pub val_losses: Vec<T>,
    /// Mean training batch loss of each epoch.
    pub train_losses: Vec<T>,
}

/// Local finetuning from `w_start`; with `lambda > 0` this is Ditto with the
/// anchor frozen at `w_start`. Returns the checkpoint with the lowest local
/// validation loss over epochs `0..=epochs`.
#[allow(clippy::too_many_arguments)]
pub fn finetune<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &O,
    w_start: &ParamVec<T>,
    train: &ClientDataset<T>,
    val: &ClientDataset<T>,
    epochs: usize,
    lambda: T,
    cfg: &TrainerConfig<T>,
    seed: u64,
) -> Result<Finetuned<T>> {
    if !(lambda >= T::zero()) {
        return Err(Error::InvalidArgument(format!("λ must be ≥ 0, got {lambda}")));
    }
    let mut cfg = TrainerConfig {
        budget: Budget::Epochs(1),
        ..cfg.clone()
    };
    let anchor = w_start.clone();
    let start_loss = local_validate(objective, w_start, val)?;
    let mut out = Finetuned {
        best: w_start.clone(),
        best_epoch: 0,
        best_val_loss: start_loss,
        last: w_start.clone(),
        last_val_loss: start_loss,
        steps: 0,
        val_losses: Vec::with_capacity(epochs),
        train_losses: Vec::with_capacity(epochs),
    };
    let mut w = w_start.clone();
    for epoch in 1..=epochs {
        let prox = if lambda > T::zero() {
            Some(Proximal {
                lambda,
                anchor: &anchor,
            })
        } else {
            None
        };
        let r = local_update(
            objective,
            &w,
            train,
            &cfg,
            None,
            prox,
            crate::rng::derive_seed(seed, "finetune", &[epoch as u64]),
        )?;
        cfg.learning_rate = r.next_learning_rate;
        out.steps += r.steps;
        out.train_losses
            .push(r.train_losses.iter().copied().sum::<T>() / T::from_count(r.train_losses.len().max(1)));
        w = r.params;
        let l = local_validate(objective, &w, val)?;
        out.val_losses.push(l);
        if l < out.best_val_loss {
            out.best = w.clone();
            out.best_epoch = epoch;
            out.best_val_loss = l;
        }
        out.last_val_loss = l;
    }
    out.last = w;
    Ok(out)
}
