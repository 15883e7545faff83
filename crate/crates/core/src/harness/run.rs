use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Algorithm, ClusterLabels, ExperimentConfig, Source, Weighting};
use super::report::{read_params, FoldReport, RunReport};
use super::setup::{build_federation, ClientData, Federation};
use crate::aggregation::{
    fedadam_step, fedavg_step, fednova_step, fedpid_weights, qfedavg_step, scaffold_client_finalize,
    scaffold_server_step, weighted_step, AveragingMode, FedAdamState, PidState, ScaffoldState,
};
use crate::clustering::{cluster_weights, prior_clusters, scheduled_cfl_round, ClusterState, Provenance, SplitEvent};
use crate::cost::{ClientLoad, CostReport, PhaseCost, RoundPlan};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_report, dice_score, hausdorff95, Mask3, MaskPair, SampleMetrics};
use crate::param::{masked_overwrite, ClientUpdate, UpdateSet};
use crate::personalization::{finetune, make_share_mask, partial_round, shared_part, ShareMask, ShareStrategy};
use crate::rng::derive_seed;
use crate::tasks::{ClientDataset, Objective, TaskKind, TaskModel};
use crate::trainer::{local_update, local_validate, Budget, Correction, TrainerConfig};
use crate::ParamVector;

/// One recorded round (or epoch) of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub phase: String,
    pub round: usize,
    /// Client updates received this round.
    pub participants: usize,
    /// Mean batch loss over every local step of the round.
    pub train_loss: f64,
    /// Sample-weighted mean validation loss over all clients.
    pub global_val_loss: f64,
    /// Mean validation loss per client, in client id order.
    pub client_val_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub phase: String,
    pub round: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub id: usize,
    pub members: Vec<usize>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub provenance: Provenance,
    pub splits: Vec<SplitEvent>,
    pub clusters: Vec<ClusterInfo>,
}

/// A finished run: the report plus the selected model of every client for the
/// last fold run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub models: BTreeMap<usize, ParamVector>,
    /// Selected global model, for methods that have one.
    pub global: Option<ParamVector>,
    /// Global model after the final round, for methods that have one.
    pub last: Option<ParamVector>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    task: &'a TaskModel,
    clients: &'a [ClientData],
    pool: &'a rayon::ThreadPool,
}

impl Ctx<'_> {
    fn ids(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.client_id).collect()
    }

    fn train_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.train.len()).collect()
    }

    /// Runs `f` for every client, possibly in parallel, and returns results in
    /// client order. The first failing client (by order) is reported.
    fn per_client<R: Send>(&self, round: usize, f: impl Fn(&ClientData) -> Result<R> + Sync) -> Result<Vec<R>> {
        let results: Vec<Result<R>> = self.pool.install(|| self.clients.par_iter().map(&f).collect());
        results
            .into_iter()
            .zip(self.clients)
            .map(|(r, c)| r.map_err(|e| e.in_round(round, c.client_id)))
            .collect()
    }

    fn local_seed(&self, phase: u64, round: usize, slot: usize) -> u64 {
        derive_seed(self.cfg.seed, "local", &[phase, round as u64, slot as u64])
    }
}

/// Tracks the recorded curve and the best checkpoints.
struct Recorder {
    curves: Vec<CurvePoint>,
    best: Option<(BestCheckpoint, ParamVector)>,
    client_best: BTreeMap<usize, (BestCheckpoint, ParamVector)>,
}

impl Recorder {
    fn new() -> Self {
        Self {
            curves: Vec::new(),
            best: None,
            client_best: BTreeMap::new(),
        }
    }

    /// Validation of per-client models (`models[k]` for client `k`); a single
    /// shared model is passed as the same reference for everyone.
    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        ctx: &Ctx,
        phase: &str,
        round: usize,
        participants: usize,
        train_loss: f64,
        models: &[&ParamVector],
        global: Option<&ParamVector>,
    ) -> Result<f64> {
        let sums = ctx.per_client(round, |c| local_validate(ctx.task, models[c.slot], &c.val))?;
        let n: usize = ctx.clients.iter().map(|c| c.val.len()).sum();
        let global_val = sums.iter().sum::<f64>() / n as f64;
        let client_val: Vec<f64> = sums
            .iter()
            .zip(ctx.clients)
            .map(|(s, c)| s / c.val.len() as f64)
            .collect();
        self.curves.push(CurvePoint {
            phase: phase.to_string(),
            round,
            participants,
            train_loss,
            global_val_loss: global_val,
            client_val_loss: client_val.clone(),
        });
        let mark = |val_loss: f64| BestCheckpoint {
            phase: phase.to_string(),
            round,
            val_loss,
        };
        if let Some(g) = global {
            if self.best.as_ref().is_none_or(|(b, _)| global_val < b.val_loss) {
                self.best = Some((mark(global_val), g.clone()));
            }
        }
        for (c, v) in ctx.clients.iter().zip(&client_val) {
            let better = self.client_best.get(&c.client_id).is_none_or(|(b, _)| *v < b.val_loss);
            if better {
                self.client_best.insert(c.client_id, (mark(*v), models[c.slot].clone()));
            }
        }
        Ok(global_val)
    }

    /// Forget per-client selections, e.g. after a shared pretraining phase.
    fn reset_clients(&mut self) {
        self.client_best.clear();
    }
}

fn mean_loss(losses: &[&[f64]]) -> f64 {
    let n: usize = losses.iter().map(|l| l.len()).sum();
    if n == 0 {
        return 0.0;
    }
    losses.iter().flat_map(|l| l.iter()).sum::<f64>() / n as f64
}

enum Server {
    Avg(AveragingMode),
    Nova,
    Adam(FedAdamState<f64>),
    Scaffold(ScaffoldState<f64>),
    Q(f64),
    Pid(PidState<f64>),
}

impl Server {
    fn for_algorithm(alg: &Algorithm, w0: &ParamVector, ids: &[usize]) -> Result<Self> {
        Ok(match alg {
            Algorithm::FedavgFixedEpochs {
                weighting: Weighting::Uniform,
                ..
            }
            | Algorithm::FedavgUniform { .. } => Server::Avg(AveragingMode::Uniform),
            Algorithm::FedavgFixedEpochs { .. } | Algorithm::FedavgFixedIterations { .. } => {
                Server::Avg(AveragingMode::Weighted)
            }
            Algorithm::Fednova { .. } => Server::Nova,
            Algorithm::Fedadam {
                server_lr,
                beta1,
                beta2,
                tau,
            } => Server::Adam(FedAdamState::new(w0, *server_lr, *beta1, *beta2, *tau)?),
            Algorithm::Scaffold { .. } => Server::Scaffold(ScaffoldState::new(w0, ids.iter().copied())),
            Algorithm::Qfedavg { q } => Server::Q(*q),
            Algorithm::Fedpidavg { alpha, beta, gamma } => Server::Pid(PidState::new(*alpha, *beta, *gamma)?),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "{} is not a global federated method",
                    other.id()
                )))
            }
        })
    }
}

struct LocalOut {
    delta: ParamVector,
    steps: usize,
    losses: Vec<f64>,
    next_lr: f64,
    delta_control: Option<ParamVector>,
    received_loss: Option<f64>,
    local_val: Option<f64>,
}

/// Global federated training from `w0`. Returns the last global model.
#[allow(clippy::too_many_arguments)]
fn run_global(
    ctx: &Ctx,
    mut server: Server,
    w0: ParamVector,
    rounds: usize,
    base: &TrainerConfig<f64>,
    phase: &str,
    phase_idx: u64,
    rec: &mut Recorder,
) -> Result<ParamVector> {
    let mut w = w0;
    let mut lrs = vec![base.learning_rate; ctx.clients.len()];
    let sizes = ctx.train_sizes();
    let ids = ctx.ids();
    for round in 1..=rounds {
        let outs = ctx.per_client(round, |c| {
            let cfg = TrainerConfig {
                learning_rate: lrs[c.slot],
                ..base.clone()
            };
            let received_loss = match server {
                Server::Q(_) => Some(local_validate(ctx.task, &w, &c.train)?),
                _ => None,
            };
            let correction = match &server {
                Server::Scaffold(st) => Some(Correction {
                    global: &st.global,
                    local: st.client(c.client_id)?,
                }),
                _ => None,
            };
            let r = local_update(
                ctx.task,
                &w,
                &c.train,
                &cfg,
                correction,
                None,
                ctx.local_seed(phase_idx, round, c.slot),
            )?;
            let delta_control = match &server {
                Server::Scaffold(st) => Some(
                    scaffold_client_finalize(&st.global, st.client(c.client_id)?, &r.delta, r.steps, r.learning_rate)?
                        .0,
                ),
                _ => None,
            };
            let local_val = match server {
                Server::Pid(_) => Some(local_validate(ctx.task, &r.params, &c.val)?),
                _ => None,
            };
            Ok(LocalOut {
                delta: r.delta,
                steps: r.steps,
                losses: r.train_losses,
                next_lr: r.next_learning_rate,
                delta_control,
                received_loss,
                local_val,
            })
        })?;
        let round_lr = lrs[0];
        let train_loss = mean_loss(&outs.iter().map(|o| o.losses.as_slice()).collect::<Vec<_>>());
        let mut updates = Vec::with_capacity(outs.len());
        let mut received = Vec::with_capacity(outs.len());
        let mut local_vals = Vec::with_capacity(outs.len());
        for ((o, c), lr) in outs.into_iter().zip(ctx.clients).zip(lrs.iter_mut()) {
            *lr = o.next_lr;
            received.extend(o.received_loss);
            local_vals.extend(o.local_val.map(|v| (c.client_id, v)));
            let mut u = ClientUpdate::new(c.client_id, o.delta, o.steps);
            if let Some(dc) = o.delta_control {
                u = u.with_control(dc);
            }
            updates.push(u);
        }
        let participants = updates.len();
        let at = |e: Error| e.in_round(round, 0);
        w = match &mut server {
            Server::Avg(mode) => {
                let mode = *mode;
                let u = UpdateSet::weighted_by_size(updates, &sizes).map_err(at)?;
                fedavg_step(&w, &u, mode).map_err(at)?
            }
            Server::Nova => fednova_step(&w, &UpdateSet::weighted_by_size(updates, &sizes).map_err(at)?).map_err(at)?,
            Server::Adam(st) => {
                let u = UpdateSet::weighted_by_size(updates, &sizes).map_err(at)?;
                let (next, s) = fedadam_step(st, &w, &u).map_err(at)?;
                *st = s;
                next
            }
            Server::Scaffold(st) => {
                let u = UpdateSet::weighted_by_size(updates, &sizes).map_err(at)?;
                let (next, s) = scaffold_server_step(st, &w, &u).map_err(at)?;
                *st = s;
                next
            }
            Server::Q(q) => {
                let u = UpdateSet::uniform(updates).map_err(at)?;
                qfedavg_step(&w, &u, &received, *q, round_lr).map_err(at)?
            }
            Server::Pid(st) => {
                let u = UpdateSet::weighted_by_size(updates, &sizes).map_err(at)?;
                let (weights, s) = fedpid_weights(st, &ids, u.weights(), &local_vals).map_err(at)?;
                *st = s;
                weighted_step(&w, &u, &weights).map_err(at)?
            }
        };
        let models = vec![&w; ctx.clients.len()];
        rec.record(ctx, phase, round, participants, train_loss, &models, Some(&w))?;
    }
    Ok(w)
}

/// Single-model SGD over `data` (all pooled clients or one institution).
fn run_single(
    ctx: &Ctx,
    data: &ClientDataset<f64>,
    w0: ParamVector,
    rounds: usize,
    rec: &mut Recorder,
) -> Result<ParamVector> {
    let base = TrainerConfig {
        budget: Budget::Epochs(1),
        ..ctx.cfg.trainer_config()
    };
    let mut w = w0;
    let mut lr = base.learning_rate;
    for epoch in 1..=rounds {
        let cfg = TrainerConfig {
            learning_rate: lr,
            ..base.clone()
        };
        let r = local_update(ctx.task, &w, data, &cfg, None, None, ctx.local_seed(0, epoch, 0))
            .map_err(|e| e.in_round(epoch, data.client_id))?;
        lr = r.next_learning_rate;
        w = r.params;
        let models = vec![&w; ctx.clients.len()];
        rec.record(
            ctx,
            "single",
            epoch,
            1,
            mean_loss(&[&r.train_losses]),
            &models,
            Some(&w),
        )?;
    }
    Ok(w)
}

/// FedPer / LG-FedAvg: shared blocks averaged, private blocks stay local.
fn run_partial(ctx: &Ctx, mask: &ShareMask, w0: ParamVector, rounds: usize, rec: &mut Recorder) -> Result<()> {
    let base = ctx.cfg.trainer_config();
    let mut global = w0.clone();
    let mut models: BTreeMap<usize, ParamVector> = ctx.ids().into_iter().map(|id| (id, w0.clone())).collect();
    let mut lrs = vec![base.learning_rate; ctx.clients.len()];
    let sizes = ctx.train_sizes();
    for round in 1..=rounds {
        let outs = ctx.per_client(round, |c| {
            let start = masked_overwrite(&models[&c.client_id], &global, &mask.shared_blocks)?;
            let cfg = TrainerConfig {
                learning_rate: lrs[c.slot],
                ..base.clone()
            };
            let r = local_update(
                ctx.task,
                &start,
                &c.train,
                &cfg,
                None,
                None,
                ctx.local_seed(0, round, c.slot),
            )?;
            let shared = shared_part(&r.delta, mask)?;
            Ok((shared, r))
        })?;
        let train_loss = mean_loss(&outs.iter().map(|(_, r)| r.train_losses.as_slice()).collect::<Vec<_>>());
        let mut updates = Vec::with_capacity(outs.len());
        for ((shared, r), c) in outs.into_iter().zip(ctx.clients) {
            lrs[c.slot] = r.next_learning_rate;
            updates.push(ClientUpdate::new(c.client_id, shared, r.steps));
            models.insert(c.client_id, r.params);
        }
        let participants = updates.len();
        let u = UpdateSet::weighted_by_size(updates, &sizes).map_err(|e| e.in_round(round, 0))?;
        let (next, kept) = partial_round(&global, &models, &u, mask).map_err(|e| e.in_round(round, 0))?;
        global = next;
        models = kept
            .into_iter()
            .map(|(id, m)| Ok((id, masked_overwrite(&m, &global, &mask.shared_blocks)?)))
            .collect::<Result<_>>()?;
        let refs: Vec<&ParamVector> = ctx.clients.iter().map(|c| &models[&c.client_id]).collect();
        rec.record(ctx, "federated", round, participants, train_loss, &refs, None)?;
    }
    Ok(())
}

/// Per-cluster FedAvg with scheduled splits (none for prior clusters).
fn run_clusters(
    ctx: &Ctx,
    mut state: ClusterState<f64>,
    rounds: usize,
    phase_idx: u64,
    rec: &mut Recorder,
) -> Result<ClusterState<f64>> {
    let base = ctx.cfg.trainer_config();
    let mut lrs = vec![base.learning_rate; ctx.clients.len()];
    let sizes: BTreeMap<usize, usize> = ctx.clients.iter().map(|c| (c.client_id, c.train.len())).collect();
    for round in 1..=rounds {
        let outs = ctx.per_client(round, |c| {
            let cluster = state
                .cluster_of(c.client_id)
                .ok_or_else(|| Error::InvalidArgument(format!("client {} belongs to no cluster", c.client_id)))?;
            let cfg = TrainerConfig {
                learning_rate: lrs[c.slot],
                ..base.clone()
            };
            local_update(
                ctx.task,
                &cluster.params,
                &c.train,
                &cfg,
                None,
                None,
                ctx.local_seed(phase_idx, round, c.slot),
            )
        })?;
        let train_loss = mean_loss(&outs.iter().map(|r| r.train_losses.as_slice()).collect::<Vec<_>>());
        let mut by_client: BTreeMap<usize, ClientUpdate<f64>> = BTreeMap::new();
        for (r, c) in outs.into_iter().zip(ctx.clients) {
            lrs[c.slot] = r.next_learning_rate;
            by_client.insert(c.client_id, ClientUpdate::new(c.client_id, r.delta, r.steps));
        }
        let participants = by_client.len();
        let mut sets = BTreeMap::new();
        for cl in &state.clusters {
            let ups: Vec<_> = cl.members.iter().map(|m| by_client[m].clone()).collect();
            let weights = cluster_weights(&cl.members, &sizes).map_err(|e| e.in_round(round, 0))?;
            sets.insert(cl.id, UpdateSet::new(ups, weights).map_err(|e| e.in_round(round, 0))?);
        }
        state = scheduled_cfl_round(&state, round, &sets).map_err(|e| e.in_round(round, 0))?;
        let refs: Vec<&ParamVector> = ctx
            .clients
            .iter()
            .map(|c| {
                &state
                    .cluster_of(c.client_id)
                    .expect("clusters cover every client")
                    .params
            })
            .collect();
        let phase = match state.provenance {
            Provenance::Similarity => "federated",
            Provenance::Prior => "clustered",
        };
        rec.record(ctx, phase, round, participants, train_loss, &refs, None)?;
    }
    Ok(state)
}

fn starting_model(ctx: &Ctx, source: &Source, lr: f64, w0: ParamVector, rec: &mut Recorder) -> Result<ParamVector> {
    match source {
        Source::Checkpoint(path) => {
            let w = read_params(path)?;
            if w.layout() != Objective::<f64>::layout(ctx.task) {
                return Err(Error::Config(format!(
                    "{}: checkpoint layout does not match the {} task",
                    path.display(),
                    ctx.task.kind().name()
                )));
            }
            Ok(w)
        }
        Source::PretrainRounds(n) => {
            let base = TrainerConfig {
                learning_rate: lr,
                budget: Budget::Epochs(1),
                ..ctx.cfg.trainer_config()
            };
            let last = run_global(
                ctx,
                Server::Avg(AveragingMode::Weighted),
                w0,
                *n,
                &base,
                "pretrain",
                1,
                rec,
            )?;
            rec.reset_clients();
            Ok(rec.best.as_ref().map(|(_, w)| w.clone()).unwrap_or(last))
        }
    }
}

fn dominant_groups(ctx: &Ctx) -> BTreeMap<usize, String> {
    ctx.clients
        .iter()
        .map(|c| {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for s in c.train.samples.iter().chain(&c.val.samples).chain(&c.test.samples) {
                *counts.entry(s.group).or_default() += 1;
            }
            let top = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map_or(0, |(g, _)| *g);
            (c.client_id, format!("group_{top}"))
        })
        .collect()
}

/// Pooled training data of every client, in client order.
fn pooled(clients: &[ClientData]) -> ClientDataset<f64> {
    ClientDataset::new(
        0,
        clients.iter().flat_map(|c| c.train.samples.iter().cloned()).collect(),
    )
}

fn share_mask(cfg: &ExperimentConfig, task: &TaskModel) -> Result<Option<ShareMask>> {
    let (strategy, n) = match &cfg.algorithm {
        Algorithm::Fedper { n_private } => (ShareStrategy::Fedper, *n_private),
        Algorithm::LgFedavg { n_private } => (ShareStrategy::LgFedavg, *n_private),
        _ => return Ok(None),
    };
    let layout = Objective::<f64>::layout(task);
    let names: Vec<&str> = layout.names().collect();
    // the benchmark default of 4 private layers assumes a deep network
    let n = n.unwrap_or_else(|| crate::personalization::DEFAULT_PRIVATE_BLOCKS.min(names.len().saturating_sub(1)));
    make_share_mask(&names, strategy, n).map(Some).map_err(|e| {
        Error::Config(format!(
            "{} on the {} task: {e}",
            cfg.algorithm.id(),
            task.kind().name()
        ))
    })
}

/// Per-round loads for the cost model: `(steps, eval)` per client.
fn loads(ctx: &Ctx, budget: &TrainerConfig<f64>) -> Vec<ClientLoad> {
    ctx.clients
        .iter()
        .map(|c| ClientLoad::new(budget.steps_for(c.train.len()) as u64, c.val.len() as u64))
        .collect()
}

fn run_cost(ctx: &Ctx, mask: Option<&ShareMask>) -> Result<CostReport> {
    let cfg = ctx.cfg;
    let c = &cfg.cost;
    let s = c.model_floats;
    let rounds = cfg.rounds() as u64;
    let tc = cfg.trainer_config();
    let epoch = TrainerConfig {
        budget: Budget::Epochs(1),
        ..tc.clone()
    };
    let fed = |r: u64, floats: f64, t: &TrainerConfig<f64>| -> Result<PhaseCost> {
        Ok(PhaseCost::of(
            "federated",
            &RoundPlan::symmetric(r, loads(ctx, t), floats)?,
            c,
        ))
    };
    let pretrain = |source: &Source| -> Result<Vec<PhaseCost>> {
        Ok(match source {
            Source::PretrainRounds(n) => {
                let mut p = fed(*n as u64, s, &epoch)?;
                p.name = "pretrain".into();
                vec![p]
            }
            Source::Checkpoint(_) => Vec::new(),
        })
    };
    let single = |data_steps: u64, eval: u64| -> Result<PhaseCost> {
        Ok(PhaseCost::of(
            "single",
            &RoundPlan::symmetric(rounds, vec![ClientLoad::new(data_steps, eval)], 0.0)?,
            c,
        ))
    };
    let phases = match &cfg.algorithm {
        Algorithm::Centralized => {
            let n: usize = ctx.clients.iter().map(|c| c.train.len()).sum();
            let v: usize = ctx.clients.iter().map(|c| c.val.len()).sum();
            vec![single(epoch.steps_for(n) as u64, v as u64)?]
        }
        Algorithm::LocalOnly { client_id } => {
            let cl = ctx
                .clients
                .iter()
                .find(|c| c.client_id == *client_id)
                .ok_or_else(|| Error::Config(format!("no client {client_id} in the federation")))?;
            vec![single(epoch.steps_for(cl.train.len()) as u64, cl.val.len() as u64)?]
        }
        Algorithm::Scaffold { .. } => vec![fed(rounds, 2.0 * s, &tc)?],
        Algorithm::Fedper { .. } | Algorithm::LgFedavg { .. } => {
            let mask = mask.expect("partial methods carry a mask");
            let layout = Objective::<f64>::layout(ctx.task);
            let frac = mask.shared_len(layout)? as f64 / layout.dim() as f64;
            vec![fed(rounds, s * frac, &tc)?]
        }
        Algorithm::LocalFinetuning { epochs, source, .. } | Algorithm::Ditto { epochs, source, .. } => {
            let mut p = pretrain(source)?;
            if *epochs > 0 {
                p.push(PhaseCost::of(
                    "finetune",
                    &RoundPlan::symmetric(*epochs as u64, loads(ctx, &epoch), 0.0)?,
                    c,
                ));
            }
            p
        }
        Algorithm::PriorCfl { source, .. } => {
            let mut p = pretrain(source)?;
            let mut f = fed(rounds, s, &tc)?;
            f.name = "clustered".into();
            p.push(f);
            p
        }
        _ => vec![fed(rounds, s, &tc)?],
    };
    Ok(CostReport::new(cfg.algorithm.id(), phases))
}

fn sample_metrics(
    task: &TaskModel,
    w: &ParamVector,
    c: &ClientDataset<f64>,
    fold: usize,
) -> Result<Vec<SampleMetrics>> {
    c.samples
        .iter()
        .map(|s| {
            let mut values = BTreeMap::new();
            values.insert("loss".to_string(), Some(task.sample_loss(w, s)?));
            match task.kind() {
                TaskKind::VoxelDice { grid, .. } => {
                    let p = task.voxel_probabilities(w, s)?;
                    // samples are stored with the last grid axis fastest
                    let shape = [grid[2], grid[1], grid[0]];
                    let pred = Mask3::new(shape, p.iter().map(|v| *v > 0.5).collect())?;
                    let gt = Mask3::new(shape, s.y.iter().map(|v| *v > 0.5).collect())?;
                    let pair = MaskPair::new(pred, gt)?;
                    values.insert("dice".to_string(), Some(dice_score(&pair)));
                    values.insert("hd95".to_string(), hausdorff95(&pair));
                }
                TaskKind::LogisticRegression { inputs } => {
                    let wt = w.block("weight")?;
                    let z: f64 = wt.iter().zip(&s.x[..*inputs]).map(|(a, b)| a * b).sum::<f64>() + w.block("bias")?[0];
                    let hit = (z > 0.0) == (s.y[0] > 0.5);
                    values.insert("accuracy".to_string(), Some(if hit { 1.0 } else { 0.0 }));
                }
                _ => {}
            }
            Ok(SampleMetrics {
                client_id: c.client_id,
                fold,
                sample_id: s.id,
                values,
            })
        })
        .collect()
}

struct FoldResult {
    report: FoldReport,
    samples: Vec<SampleMetrics>,
    models: BTreeMap<usize, ParamVector>,
    global: Option<ParamVector>,
    last: Option<ParamVector>,
}

fn run_fold(cfg: &ExperimentConfig, fed: &Federation, fold: usize, pool: &rayon::ThreadPool) -> Result<FoldResult> {
    let clients = fed.fold_data(fold)?;
    let ctx = Ctx {
        cfg,
        task: &fed.task,
        clients: &clients,
        pool,
    };
    let mask = share_mask(cfg, &fed.task)?;
    let cost = run_cost(&ctx, mask.as_ref())?;
    let w0: ParamVector = fed.task.init_params(derive_seed(cfg.seed, "init", &[]));
    let rounds = cfg.rounds();
    let mut rec = Recorder::new();
    let mut clusters = None;
    let mut last = None;

    match &cfg.algorithm {
        Algorithm::Centralized => {
            last = Some(run_single(&ctx, &pooled(&clients), w0, rounds, &mut rec)?);
        }
        Algorithm::LocalOnly { client_id } => {
            let c = clients
                .iter()
                .find(|c| c.client_id == *client_id)
                .ok_or_else(|| Error::Config(format!("no client {client_id} in the federation")))?;
            last = Some(run_single(&ctx, &c.train, w0, rounds, &mut rec)?);
        }
        Algorithm::LocalFinetuning {
            epochs,
            source,
            client_learning_rates,
            pretrain_learning_rate,
        }
        | Algorithm::Ditto {
            epochs,
            source,
            client_learning_rates,
            pretrain_learning_rate,
            ..
        } => {
            let lambda = match &cfg.algorithm {
                Algorithm::Ditto { lambda, .. } => *lambda,
                _ => 0.0,
            };
            let start = starting_model(&ctx, source, *pretrain_learning_rate, w0, &mut rec)?;
            let base = TrainerConfig {
                budget: Budget::Epochs(1),
                ..cfg.trainer_config()
            };
            let runs = ctx.per_client(0, |c| {
                let tc = TrainerConfig {
                    learning_rate: client_learning_rates
                        .get(&c.client_id)
                        .copied()
                        .unwrap_or(base.learning_rate),
                    ..base.clone()
                };
                let seed = derive_seed(cfg.seed, "finetune", &[c.slot as u64]);
                finetune(ctx.task, &start, &c.train, &c.val, *epochs, lambda, &tc, seed)
            })?;
            let n_val: usize = clients.iter().map(|c| c.val.len()).sum();
            for e in 0..*epochs {
                let sums: Vec<f64> = runs.iter().map(|r| r.val_losses[e]).collect();
                let train = runs.iter().map(|r| r.train_losses[e]).sum::<f64>() / runs.len() as f64;
                rec.curves.push(CurvePoint {
                    phase: "finetune".into(),
                    round: e + 1,
                    participants: runs.len(),
                    train_loss: train,
                    global_val_loss: sums.iter().sum::<f64>() / n_val as f64,
                    client_val_loss: sums.iter().zip(&clients).map(|(s, c)| s / c.val.len() as f64).collect(),
                });
            }
            for (r, c) in runs.into_iter().zip(&clients) {
                let mark = BestCheckpoint {
                    phase: if r.best_epoch == 0 { "start" } else { "finetune" }.into(),
                    round: r.best_epoch,
                    val_loss: r.best_val_loss / c.val.len() as f64,
                };
                rec.client_best.insert(c.client_id, (mark, r.best));
            }
        }
        Algorithm::Fedper { .. } | Algorithm::LgFedavg { .. } => {
            run_partial(&ctx, mask.as_ref().expect("mask built above"), w0, rounds, &mut rec)?;
        }
        Algorithm::Cfl { schedule } => {
            let state = ClusterState::root(&ctx.ids(), w0, schedule.clone())?;
            clusters = Some(run_clusters(&ctx, state, rounds, 0, &mut rec)?);
        }
        Algorithm::PriorCfl {
            labels,
            source,
            pretrain_learning_rate,
        } => {
            let assignment = match labels {
                ClusterLabels::DominantGroup => dominant_groups(&ctx),
                ClusterLabels::Explicit(map) => {
                    let ids = ctx.ids();
                    if ids.iter().any(|id| !map.contains_key(id)) || map.keys().any(|k| !ids.contains(k)) {
                        return Err(Error::Config(
                            "explicit cluster labels must cover exactly the federation's clients".into(),
                        ));
                    }
                    map.clone()
                }
            };
            let start = starting_model(&ctx, source, *pretrain_learning_rate, w0, &mut rec)?;
            let state = prior_clusters(&assignment, &start).map_err(|e| Error::Config(e.to_string()))?;
            clusters = Some(run_clusters(&ctx, state, rounds, 2, &mut rec)?);
        }
        alg => {
            let server = Server::for_algorithm(alg, &w0, &ctx.ids())?;
            last = Some(run_global(
                &ctx,
                server,
                w0,
                rounds,
                &cfg.trainer_config(),
                "federated",
                0,
                &mut rec,
            )?);
        }
    }

    let personalized = cfg.algorithm.is_personalized();
    let global = if personalized {
        None
    } else {
        rec.best.as_ref().map(|(_, w)| w.clone())
    };
    let models: BTreeMap<usize, ParamVector> = clients
        .iter()
        .map(|c| {
            let w = match &global {
                Some(g) => g.clone(),
                None => rec.client_best[&c.client_id].1.clone(),
            };
            (c.client_id, w)
        })
        .collect();
    let samples = ctx.per_client(0, |c| sample_metrics(ctx.task, &models[&c.client_id], &c.test, fold))?;

    let report = FoldReport {
        fold,
        client_ids: ctx.ids(),
        curves: rec.curves,
        best: if personalized {
            None
        } else {
            rec.best.as_ref().map(|(b, _)| b.clone())
        },
        client_best: if personalized {
            rec.client_best.iter().map(|(id, (b, _))| (*id, b.clone())).collect()
        } else {
            BTreeMap::new()
        },
        clusters: clusters.map(|st| ClusterSummary {
            provenance: st.provenance,
            splits: st.history.clone(),
            clusters: st
                .clusters
                .iter()
                .map(|c| ClusterInfo {
                    id: c.id,
                    members: c.members.clone(),
                    label: c.label.clone(),
                })
                .collect(),
        }),
        cost,
        sizes: fed.summary(fold)?,
    };
    Ok(FoldResult {
        report,
        samples: samples.into_iter().flatten().collect(),
        models,
        global,
        last,
    })
}

/// Runs every selected fold of the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let fed = build_federation(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.workers.unwrap_or(0))))?;
    let mut folds = Vec::new();
    let mut samples = Vec::new();
    let mut models = BTreeMap::new();
    let mut global = None;
    let mut last = None;
    for fold in cfg.folds.selected() {
        let r = run_fold(cfg, &fed, fold, &pool)?;
        folds.push(r.report);
        samples.extend(r.samples);
        models = r.models;
        global = r.global;
        last = r.last;
    }
    let ids: Vec<usize> = fed.clients.iter().map(|c| c.client_id).collect();
    let report = RunReport::new(cfg.clone(), folds, aggregate_report(samples, &ids))?;
    Ok(RunOutcome {
        report,
        models,
        global,
        last,
    })
}

/// Centralized baseline for `cfg`'s data, whatever algorithm it names.
pub fn run_centralized(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let mut c = cfg.clone();
    c.algorithm = Algorithm::Centralized;
    run_experiment(&c)
}

/// Per-algorithm cost table for the federation `cfg` describes.
pub fn cost_table(cfg: &ExperimentConfig, settings: &crate::cost::TableSettings) -> Result<Vec<CostReport>> {
    let fed = build_federation(cfg)?;
    let fold = cfg.folds.selected()[0];
    let clients = fed.fold_data(fold)?;
    let epoch = TrainerConfig {
        budget: Budget::Epochs(1),
        ..cfg.trainer_config()
    };
    let loads: Vec<ClientLoad> = clients
        .iter()
        .map(|c| ClientLoad::new(epoch.steps_for(c.train.len()) as u64, c.val.len() as u64))
        .collect();
    let n: usize = clients.iter().map(|c| c.train.len()).sum();
    let v: usize = clients.iter().map(|c| c.val.len()).sum();
    crate::cost::comparison_table(
        &loads,
        ClientLoad::new(epoch.steps_for(n) as u64, v as u64),
        &cfg.cost,
        settings,
    )
}
