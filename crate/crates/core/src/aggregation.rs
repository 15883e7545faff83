//! Server-side aggregation rules.
//!
//! Every rule is a pure transition `(state, w, updates) → (w', state')`
//! invoked once per round at the synchronization barrier. Reductions over
//! clients run in ascending client id order (the order [`UpdateSet`] keeps).

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{combine, ParamVec, UpdateSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// `p_k` from the update set, usually `n_k / N`.
    Weighted,
    /// `1 / K`
    Uniform,
}

/// `w + Σ p_k Δw_k` or `w + (1/K) Σ Δw_k`.
pub fn fedavg_step<T: Scalar>(w: &ParamVec<T>, u: &UpdateSet<T>, mode: AveragingMode) -> Result<ParamVec<T>> {
    w.check_compatible(&u.updates()[0].delta, 0)?;
    let weights = match mode {
        AveragingMode::Weighted => u.weights().to_vec(),
        AveragingMode::Uniform => vec![T::one() / T::from_count(u.len()); u.len()],
    };
    let step = combine(&weights, &u.deltas())?;
    w.add(&step)
}

/// FedNova's analytical server rate `γ = K Σ p_k²`.
pub fn fednova_gamma<T: Scalar>(weights: &[T]) -> T {
    let k = T::from_count(weights.len());
    k * weights.iter().fold(T::zero(), |acc, &p| acc + p * p)
}

/// `w + (γ/K) Σ Δw_k`
pub fn fednova_step<T: Scalar>(w: &ParamVec<T>, u: &UpdateSet<T>) -> Result<ParamVec<T>> {
    w.check_compatible(&u.updates()[0].delta, 0)?;
    let gamma = fednova_gamma(u.weights());
    let coef = gamma / T::from_count(u.len());
    let step = combine(&vec![coef; u.len()], &u.deltas())?;
    w.add(&step)
}

/// Server-side Adam moments. No bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct FedAdamState<T> {
    pub first_moment: ParamVec<T>,
    pub second_moment: ParamVec<T>,
    pub beta1: T,
    pub beta2: T,
    pub tau: T,
    pub server_lr: T,
}

impl<T: Scalar> FedAdamState<T> {
    /// Zero moments shaped like `like`.
    pub fn new(like: &ParamVec<T>, server_lr: T, beta1: T, beta2: T, tau: T) -> Result<Self> {
        let unit = T::zero()..=T::one();
        if !unit.contains(&beta1) || !unit.contains(&beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1]".into()));
        }
        if !(tau >= T::zero()) || !(server_lr > T::zero()) {
            return Err(Error::InvalidArgument("τ must be ≥ 0 and the server rate > 0".into()));
        }
        Ok(Self {
            first_moment: like.zeros_like(),
            second_moment: like.zeros_like(),
            beta1,
            beta2,
            tau,
            server_lr,
        })
    }

    /// Defaults `η_s = 0.001, β₁ = 0.9, β₂ = 0.999, τ = 1e-8`.
    pub fn with_defaults(like: &ParamVec<T>) -> Self {
        Self::new(like, T::lit(0.001), T::lit(0.9), T::lit(0.999), T::lit(1e-8)).expect("valid defaults")
    }
}

/// `g = Σp_kΔw_k; Δ' = β₁Δ + (1−β₁)g; v' = β₂v + (1−β₂)g²; w' = w + η_s Δ'/(√v' + τ)`.
///
/// The freshly updated moments are applied in the same round (usual Adam
/// ordering).
pub fn fedadam_step<T: Scalar>(
    state: &FedAdamState<T>,
    w: &ParamVec<T>,
    u: &UpdateSet<T>,
) -> Result<(ParamVec<T>, FedAdamState<T>)> {
    w.check_compatible(&state.first_moment, 0)?;
    let g = combine(u.weights(), &u.deltas())?;
    w.check_compatible(&g, 1)?;
    let mut next = state.clone();
    let mut w_out = w.clone();
    let (b1, b2) = (state.beta1, state.beta2);
    let m = next.first_moment.values_mut();
    for (mi, &gi) in m.iter_mut().zip(g.values()) {
        *mi = b1 * *mi + (T::one() - b1) * gi;
    }
    let v = next.second_moment.values_mut();
    for (vi, &gi) in v.iter_mut().zip(g.values()) {
        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
    }
    for ((wi, &mi), &vi) in w_out
        .values_mut()
        .iter_mut()
        .zip(next.first_moment.values())
        .zip(next.second_moment.values())
    {
        let den = vi.sqrt() + state.tau;
        if den > T::zero() {
            *wi = *wi + state.server_lr * mi / den;
        }
    }
    w_out.ensure_finite("FedAdam parameter")?;
    Ok((w_out, next))
}

/// SCAFFOLD control variates: global `c` and one `c_k` per client.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldState<T> {
    pub global: ParamVec<T>,
    pub clients: BTreeMap<usize, ParamVec<T>>,
}

impl<T: Scalar> ScaffoldState<T> {
    pub fn new(like: &ParamVec<T>, client_ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            global: like.zeros_like(),
            clients: client_ids.into_iter().map(|id| (id, like.zeros_like())).collect(),
        }
    }

    pub fn client(&self, id: usize) -> Result<&ParamVec<T>> {
        self.clients
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("no control variate for client {id}")))
    }
}

/// `Δc_k = −c + Δw_k/(s_k η_l)` and `c_k' = c_k + Δc_k`.
pub fn scaffold_client_finalize<T: Scalar>(
    global: &ParamVec<T>,
    local: &ParamVec<T>,
    delta_w: &ParamVec<T>,
    steps: usize,
    learning_rate: T,
) -> Result<(ParamVec<T>, ParamVec<T>)> {
    if steps == 0 {
        return Err(Error::InvalidArgument("SCAFFOLD needs at least one local step".into()));
    }
    if !(learning_rate > T::zero()) {
        return Err(Error::InvalidArgument("SCAFFOLD needs a positive learning rate".into()));
    }
    global.check_compatible(local, 1)?;
    global.check_compatible(delta_w, 2)?;
    let inv = T::one() / (T::from_count(steps) * learning_rate);
    let mut dc = delta_w.scale(inv);
    dc.add_scaled(-T::one(), global)?;
    let updated = local.add(&dc)?;
    dc.ensure_finite("control variate update")?;
    Ok((dc, updated))
}

/// `w' = w + Σp_kΔw_k; c' = c + Σp_kΔc_k`. Client variates in the returned
/// state are advanced by their `Δc_k` as well.
pub fn scaffold_server_step<T: Scalar>(
    state: &ScaffoldState<T>,
    w: &ParamVec<T>,
    u: &UpdateSet<T>,
) -> Result<(ParamVec<T>, ScaffoldState<T>)> {
    let mut controls = Vec::with_capacity(u.len());
    for upd in u.updates() {
        let dc = upd.delta_control.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("client {} sent no control variate update", upd.client_id))
        })?;
        controls.push(dc);
    }
    let w_next = fedavg_step(w, u, AveragingMode::Weighted)?;
    let dc = combine(u.weights(), &controls)?;
    let mut next = state.clone();
    next.global = state.global.add(&dc)?;
    for (upd, dck) in u.updates().iter().zip(controls) {
        let ck = next
            .clients
            .entry(upd.client_id)
            .or_insert_with(|| state.global.zeros_like());
        *ck = ck.add(dck)?;
    }
    Ok((w_next, next))
}

/// q-FedAvg. `losses[k]` is `F_k(w)`, the summed training loss of the
/// received model on client `k`, aligned with the update set's client order.
pub fn qfedavg_step<T: Scalar>(
    w: &ParamVec<T>,
    u: &UpdateSet<T>,
    losses: &[T],
    q: T,
    learning_rate: T,
) -> Result<ParamVec<T>> {
    if losses.len() != u.len() {
        return Err(Error::WeightCount {
            expected: u.len(),
            found: losses.len(),
        });
    }
    if !(q >= T::zero()) || !q.is_finite() {
        return Err(Error::InvalidArgument(format!("q must be ≥ 0, got {q}")));
    }
    if !(learning_rate > T::zero()) {
        return Err(Error::InvalidArgument("q-FedAvg needs a positive learning rate".into()));
    }
    let integral_q = q.fract() == T::zero();
    let inv_lr = T::one() / learning_rate;
    let mut coefs = Vec::with_capacity(u.len());
    let mut h_total = T::zero();
    for (upd, &f) in u.updates().iter().zip(losses) {
        if !f.is_finite() || (f <= T::zero() && !integral_q) {
            return Err(Error::InvalidArgument(format!(
                "client {} has loss {f}; q = {q} needs positive losses",
                upd.client_id
            )));
        }
        let fq = f.powf(q);
        let curvature = if q == T::zero() {
            T::zero()
        } else {
            q * f.powf(q - T::one()) * upd.delta.norm_squared()
        };
        coefs.push(inv_lr * fq);
        h_total = h_total + curvature + inv_lr * fq;
    }
    if !(h_total > T::zero()) || !h_total.is_finite() {
        return Err(Error::InvalidArgument(format!("q-FedAvg normalizer Σh_k = {h_total}")));
    }
    let coefs: Vec<T> = coefs.into_iter().map(|c| c / h_total).collect();
    let step = combine(&coefs, &u.deltas())?;
    w.check_compatible(&step, 0)?;
    w.add(&step)
}

const PID_WINDOW: usize = 6;

/// Per-client validation-loss history for FedPIDAvg, most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct PidState<T> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    history: BTreeMap<usize, VecDeque<T>>,
}

impl<T: Scalar> PidState<T> {
    pub fn new(alpha: T, beta: T, gamma: T) -> Result<Self> {
        if [alpha, beta, gamma].iter().any(|c| !(*c >= T::zero())) {
            return Err(Error::InvalidArgument("PID coefficients must be non-negative".into()));
        }
        if (alpha + beta + gamma - T::one()).abs() > T::lit(1e-9).max(T::epsilon() * T::lit(8.0)) {
            return Err(Error::InvalidArgument(format!(
                "PID coefficients must sum to 1, got {}",
                alpha + beta + gamma
            )));
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            history: BTreeMap::new(),
        })
    }

    /// `α = β = 0.45, γ = 0.1`
    pub fn with_defaults() -> Self {
        Self::new(T::lit(0.45), T::lit(0.45), T::lit(0.1)).expect("valid defaults")
    }

    pub fn history(&self, client: usize) -> Option<&VecDeque<T>> {
        self.history.get(&client)
    }

    /// Pushes this round's losses, keeping the last six per client.
    pub fn record(&mut self, losses: &[(usize, T)]) {
        for &(id, l) in losses {
            let h = self.history.entry(id).or_default();
            h.push_front(l);
            h.truncate(PID_WINDOW);
        }
    }
}

/// Records `current` into a copy of `state` and returns the aggregation
/// weights `α p_k + β Δl_k/L + γ m_k/M` aligned with `clients`.
///
/// `Δl_k = max(0, l^{t−1} − l^t)` (zero without a previous value) and `m_k`
/// sums the available history. A zero `L` or `M` moves its mass onto the
/// `p_k` term so the weights still sum to one.
pub fn fedpid_weights<T: Scalar>(
    state: &PidState<T>,
    clients: &[usize],
    p: &[T],
    current: &[(usize, T)],
) -> Result<(Vec<T>, PidState<T>)> {
    if clients.len() != p.len() {
        return Err(Error::WeightCount {
            expected: clients.len(),
            found: p.len(),
        });
    }
    let mut next = state.clone();
    next.record(current);

    let mut improvements = Vec::with_capacity(clients.len());
    let mut momenta = Vec::with_capacity(clients.len());
    for &id in clients {
        let h = next
            .history
            .get(&id)
            .filter(|h| !h.is_empty())
            .ok_or_else(|| Error::Empty(format!("validation history of client {id}")))?;
        let dl = match (h.get(1), h.front()) {
            (Some(&prev), Some(&now)) => (prev - now).max(T::zero()),
            _ => T::zero(),
        };
        improvements.push(dl);
        momenta.push(h.iter().fold(T::zero(), |a, &v| a + v));
    }
    let big_l: T = improvements.iter().copied().sum();
    let big_m: T = momenta.iter().copied().sum();
    let mut alpha = state.alpha;
    if big_l <= T::zero() {
        alpha = alpha + state.beta;
    }
    if big_m <= T::zero() {
        alpha = alpha + state.gamma;
    }
    let weights = (0..clients.len())
        .map(|k| {
            let mut wk = alpha * p[k];
            if big_l > T::zero() {
                wk = wk + state.beta * improvements[k] / big_l;
            }
            if big_m > T::zero() {
                wk = wk + state.gamma * momenta[k] / big_m;
            }
            wk
        })
        .collect();
    Ok((weights, next))
}

/// `w + Σ weight_k Δw_k` with externally computed weights (FedPIDAvg).
pub fn weighted_step<T: Scalar>(w: &ParamVec<T>, u: &UpdateSet<T>, weights: &[T]) -> Result<ParamVec<T>> {
    let step = combine(weights, &u.deltas())?;
    w.check_compatible(&step, 0)?;
    w.add(&step)
}
