//! Client-side SGD.
//!
//! One local step on batch `b` is
//! `w ← w − η(∇l(w,b) + wd·w + λ(w − anchor)) + η(c − c_k)`
//! where the proximal term is only present for Ditto-style finetuning and the
//! control-variate correction only for SCAFFOLD.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::{ClientDataset, Objective, Sample};

/// Amount of local work per call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// `E` passes over the local data.
    Epochs(usize),
    /// `U` gradient steps.
    Iterations(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig<T> {
    pub learning_rate: T,
    pub batch_size: usize,
    pub weight_decay: T,
    pub lr_decay_factor: T,
    pub budget: Budget,
}

impl<T: Scalar> TrainerConfig<T> {
    /// Batch size 4, weight decay 1e-5, decay 0.995, one epoch.
    pub fn with_learning_rate(learning_rate: T) -> Self {
        Self {
            learning_rate,
            batch_size: 4,
            weight_decay: T::lit(1e-5),
            lr_decay_factor: T::lit(0.995),
            budget: Budget::Epochs(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.weight_decay >= T::zero()) {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        if !(self.lr_decay_factor > T::zero() && self.lr_decay_factor <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "lr decay factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        Ok(())
    }

    /// Steps one call performs on a dataset of `n` samples.
    pub fn steps_for(&self, n: usize) -> usize {
        match self.budget {
            Budget::Epochs(e) => e * n.div_ceil(self.batch_size),
            Budget::Iterations(u) => u,
        }
    }
}

/// SCAFFOLD control variates `(c, c_k)`.
#[derive(Debug, Clone, Copy)]
pub struct Correction<'a, T> {
    pub global: &'a ParamVec<T>,
    pub local: &'a ParamVec<T>,
}

/// Proximal pull `λ/2‖w − anchor‖²`.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a, T> {
    pub lambda: T,
    pub anchor: &'a ParamVec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult<T> {
    /// `Δw_k = w_final − w_received`
    pub delta: ParamVec<T>,
    pub params: ParamVec<T>,
    /// `s_k`
    pub steps: usize,
    pub train_losses: Vec<T>,
    pub val_loss: Option<T>,
    pub delta_control: Option<ParamVec<T>>,
    /// Learning rate in effect at the start of the call.
    pub learning_rate: T,
    /// Learning rate after this call's decay, to carry into the next call.
    pub next_learning_rate: T,
}

/// Runs local SGD from `w_in` on `data` under `cfg`.
pub fn local_update<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &O,
    w_in: &ParamVec<T>,
    data: &ClientDataset<T>,
    cfg: &TrainerConfig<T>,
    correction: Option<Correction<'_, T>>,
    prox: Option<Proximal<'_, T>>,
    seed: u64,
) -> Result<LocalResult<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty(format!("dataset of client {}", data.client_id)));
    }
    w_in.check_compatible(&ParamVec::zeros(objective.layout()), 0)?;
    let drift: Option<Vec<T>> = match correction {
        Some(c) => {
            w_in.check_compatible(c.global, 1)?;
            w_in.check_compatible(c.local, 2)?;
            Some(
                c.global
                    .values()
                    .iter()
                    .zip(c.local.values())
                    .map(|(&g, &l)| g - l)
                    .collect(),
            )
        }
        None => None,
    };
    if let Some(p) = &prox {
        w_in.check_compatible(p.anchor, 3)?;
        if !(p.lambda >= T::zero()) {
            return Err(Error::InvalidArgument("proximal weight must be non-negative".into()));
        }
    }

    let n = data.len();
    let bs = cfg.batch_size;
    let total_steps = cfg.steps_for(n);
    let mut w = w_in.clone();
    let mut lr = cfg.learning_rate;
    let mut losses = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let mut epoch = 0u64;
    let mut order: Vec<usize> = (0..n).collect();

    while step < total_steps {
        order.sort_unstable();
        order.shuffle(&mut rng::derived_rng(seed, "epoch", &[epoch]));
        for chunk in order.chunks(bs) {
            if step == total_steps {
                break;
            }
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let (loss, grad) = objective.loss_and_grad(&w, &batch).map_err(|e| with_step(e, step))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss of client {}", data.client_id),
                    index: step,
                });
            }
            sgd_step(&mut w, &grad, lr, cfg.weight_decay, drift.as_deref(), prox.as_ref());
            if let Some(i) = w.values().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("parameter {i} of client {} after step", data.client_id),
                    index: step,
                });
            }
            losses.push(loss);
            step += 1;
        }
        epoch += 1;
        if matches!(cfg.budget, Budget::Epochs(_)) {
            lr = lr * cfg.lr_decay_factor;
        }
    }
    if matches!(cfg.budget, Budget::Iterations(_)) {
        lr = lr * cfg.lr_decay_factor;
    }

    let delta = w.sub(w_in)?;
    Ok(LocalResult {
        delta,
        params: w,
        steps: step,
        train_losses: losses,
        val_loss: None,
        delta_control: None,
        learning_rate: cfg.learning_rate,
        next_learning_rate: lr,
    })
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what, index } => Error::NonFinite {
            what: format!("{what} (sample {index} of batch)"),
            index: step,
        },
        other => other,
    }
}

#[inline]
fn sgd_step<T: Scalar>(
    w: &mut ParamVec<T>,
    grad: &ParamVec<T>,
    lr: T,
    wd: T,
    drift: Option<&[T]>,
    prox: Option<&Proximal<'_, T>>,
) {
    let anchor = prox.map(|p| (p.lambda, p.anchor.values()));
    for (i, (wi, &gi)) in w.values_mut().iter_mut().zip(grad.values()).enumerate() {
        let mut g = gi + wd * *wi;
        if let Some((lambda, a)) = anchor {
            g = g + lambda * (*wi - a[i]);
        }
        let mut next = *wi - lr * g;
        if let Some(d) = drift {
            next = next + lr * d[i];
        }
        *wi = next;
    }
}

/// `l_val = Σ_i l(w, x_i, y_i)` over the validation samples.
pub fn local_validate<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &O,
    w: &ParamVec<T>,
    val: &ClientDataset<T>,
) -> Result<T> {
    if val.is_empty() {
        return Err(Error::Empty(format!("validation set of client {}", val.client_id)));
    }
    let mut total = T::zero();
    for s in &val.samples {
        total = total + objective.sample_loss(w, s)?;
    }
    Ok(total)
}

#[cfg(test)]
pub(crate) mod test_objectives {
    use super::*;
    use crate::param::BlockMap;

    /// `f(w) = Σ_i a (w_i − target_i)²`, independent of the batch.
    pub struct Quadratic {
        pub layout: BlockMap,
        pub scale: f64,
        pub target: Vec<f64>,
    }

    impl Quadratic {
        pub fn new(scale: f64, target: Vec<f64>) -> Self {
            Self {
                layout: BlockMap::single(target.len()).unwrap(),
                scale,
                target,
            }
        }
    }

    impl Objective<f64> for Quadratic {
        fn layout(&self) -> &BlockMap {
            &self.layout
        }

        fn loss_and_grad(&self, w: &ParamVec<f64>, batch: &[&Sample<f64>]) -> Result<(f64, ParamVec<f64>)> {
            if batch.is_empty() {
                return Err(Error::Empty("batch".into()));
            }
            let mut g = w.zeros_like();
            let mut loss = 0.0;
            for (i, (&wi, &ti)) in w.values().iter().zip(&self.target).enumerate() {
                loss += self.scale * (wi - ti) * (wi - ti);
                g.values_mut()[i] = 2.0 * self.scale * (wi - ti);
            }
            Ok((loss, g))
        }

        fn sample_loss(&self, w: &ParamVec<f64>, s: &Sample<f64>) -> Result<f64> {
            Ok(self.loss_and_grad(w, &[s])?.0)
        }
    }

    pub fn dummy_data(id: usize, n: usize) -> ClientDataset<f64> {
        ClientDataset::new(
            id,
            (0..n)
                .map(|i| Sample {
                    id: i,
                    group: 0,
                    x: vec![0.0],
                    y: vec![0.0],
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::test_objectives::*;
    use super::*;
    use crate::tasks::{generate_pool, SynthSettings, TaskKind, TaskModel};

    fn plain(lr: f64, budget: Budget) -> TrainerConfig<f64> {
        TrainerConfig {
            learning_rate: lr,
            batch_size: 4,
            weight_decay: 0.0,
            lr_decay_factor: 1.0,
            budget,
        }
    }

    #[test]
    fn single_step_on_square() {
        let f = Quadratic::new(1.0, vec![0.0]);
        let w = ParamVec::from_values(vec![1.0]).unwrap();
        let r = local_update(
            &f,
            &w,
            &dummy_data(1, 1),
            &plain(0.1, Budget::Iterations(1)),
            None,
            None,
            0,
        )
        .unwrap();
        assert!((r.params.values()[0] - 0.8).abs() < 1e-15);
        assert!((r.delta.values()[0] + 0.2).abs() < 1e-15);
        assert_eq!(r.steps, 1);
    }

    #[test]
    fn equal_control_variates_cancel() {
        let task = TaskModel::new(TaskKind::LogisticRegression { inputs: 3 }).unwrap();
        let pool = generate_pool(&task, &[10], &SynthSettings::default(), 2).unwrap();
        let data = ClientDataset::new(1, pool);
        let w: ParamVec<f64> = task.init_params(3);
        let c = w.map(|v| v * 3.0 + 0.5);
        let cfg = plain(0.3, Budget::Epochs(2));
        let a = local_update(&task, &w, &data, &cfg, None, None, 9).unwrap();
        let b = local_update(
            &task,
            &w,
            &data,
            &cfg,
            Some(Correction { global: &c, local: &c }),
            None,
            9,
        )
        .unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn strong_proximal_pull() {
        let f = Quadratic::new(1.0, vec![5.0, -5.0]);
        let anchor = ParamVec::from_values(vec![0.0, 0.0]).unwrap();
        let w = ParamVec::from_values(vec![1.0, 1.0]).unwrap();
        let prox = Proximal {
            lambda: 1e6,
            anchor: &anchor,
        };
        let r = local_update(
            &f,
            &w,
            &dummy_data(1, 1),
            &plain(1e-7, Budget::Iterations(1)),
            None,
            Some(prox),
            0,
        )
        .unwrap();
        assert!(r.params.sub(&anchor).unwrap().norm() < w.sub(&anchor).unwrap().norm());
    }

    #[test]
    fn epoch_step_count_and_decay() {
        let f = Quadratic::new(1.0, vec![0.0]);
        let w = ParamVec::from_values(vec![1.0]).unwrap();
        let mut cfg = plain(0.01, Budget::Epochs(3));
        cfg.lr_decay_factor = 0.5;
        let r = local_update(&f, &w, &dummy_data(1, 9), &cfg, None, None, 0).unwrap();
        assert_eq!(r.steps, 3 * 3);
        assert!((r.next_learning_rate - 0.01 * 0.125).abs() < 1e-18);

        cfg.budget = Budget::Iterations(7);
        let r = local_update(&f, &w, &dummy_data(1, 9), &cfg, None, None, 0).unwrap();
        assert_eq!(r.steps, 7);
        assert!((r.next_learning_rate - 0.005).abs() < 1e-18);
    }

    #[test]
    fn decay_applies_between_epochs() {
        // two epochs of one step each: w1 = w0(1 − 2η), w2 = w1(1 − 2ηd)
        let f = Quadratic::new(1.0, vec![0.0]);
        let w = ParamVec::from_values(vec![1.0]).unwrap();
        let mut cfg = plain(0.1, Budget::Epochs(2));
        cfg.lr_decay_factor = 0.5;
        let r = local_update(&f, &w, &dummy_data(1, 2), &cfg, None, None, 0).unwrap();
        assert!((r.params.values()[0] - 0.8 * 0.9).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_matches_reference_loop() {
        let task = TaskModel::new(TaskKind::LinearRegression { inputs: 4, bias: true }).unwrap();
        let pool = generate_pool(&task, &[23], &SynthSettings::default(), 4).unwrap();
        let data = ClientDataset::new(1, pool);
        let w: ParamVec<f64> = task.init_params(1);
        let mut cfg = plain(0.05, Budget::Epochs(2));
        cfg.weight_decay = 1e-3;
        cfg.lr_decay_factor = 0.9;
        let r = local_update(&task, &w, &data, &cfg, None, None, 17).unwrap();

        // reference: same batch order, textbook loop over the raw arrays
        let mut reference = w.values().to_vec();
        let mut lr = 0.05;
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..2u64 {
            order.sort_unstable();
            order.shuffle(&mut rng::derived_rng(17, "epoch", &[epoch]));
            for chunk in order.chunks(4) {
                let mut g = [0.0; 5];
                for &i in chunk {
                    let s = &data.samples[i];
                    let pred: f64 = reference[..4].iter().zip(&s.x).map(|(a, b)| a * b).sum::<f64>() + reference[4];
                    let r = pred - s.y[0];
                    for j in 0..4 {
                        g[j] += r * s.x[j] / chunk.len() as f64;
                    }
                    g[4] += r / chunk.len() as f64;
                }
                for j in 0..5 {
                    reference[j] -= lr * (g[j] + 1e-3 * reference[j]);
                }
            }
            lr *= 0.9;
        }
        for (a, b) in r.params.values().iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        assert_eq!(r.steps, 2 * 6);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let task = TaskModel::new(TaskKind::Mlp1Hidden {
            inputs: 3,
            hidden: 4,
            outputs: 1,
        })
        .unwrap();
        let pool = generate_pool(&task, &[13], &SynthSettings::default(), 8).unwrap();
        let data = ClientDataset::new(1, pool);
        let w: ParamVec<f64> = task.init_params(2);
        let cfg = TrainerConfig::with_learning_rate(0.1);
        let a = local_update(&task, &w, &data, &cfg, None, None, 5).unwrap();
        let b = local_update(&task, &w, &data, &cfg, None, None, 5).unwrap();
        assert_eq!(a, b);
        let c = local_update(&task, &w, &data, &cfg, None, None, 6).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn errors() {
        let f = Quadratic::new(1.0, vec![0.0]);
        let w = ParamVec::from_values(vec![1.0]).unwrap();
        let cfg = plain(0.1, Budget::Epochs(1));
        assert!(matches!(
            local_update(&f, &w, &dummy_data(1, 0), &cfg, None, None, 0),
            Err(Error::Empty(_))
        ));
        let diverge = plain(10.0, Budget::Iterations(2000));
        match local_update(&f, &w, &dummy_data(1, 1), &diverge, None, None, 0) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected divergence error, got {other:?}"),
        }
        let mut bad = cfg.clone();
        bad.lr_decay_factor = 0.0;
        assert!(local_update(&f, &w, &dummy_data(1, 1), &bad, None, None, 0).is_err());
    }

    #[test]
    fn validation_is_a_sum() {
        let task = TaskModel::new(TaskKind::LinearRegression { inputs: 1, bias: false }).unwrap();
        let w = ParamVec::new(vec![1.0], Objective::<f64>::layout(&task).clone()).unwrap();
        // per-sample losses ½(x − y)² = 0.5 and 1.5
        let s1 = Sample {
            id: 0,
            group: 0,
            x: vec![1.0],
            y: vec![0.0],
        };
        let s2 = Sample {
            id: 1,
            group: 0,
            x: vec![3.0_f64.sqrt() + 1.0],
            y: vec![1.0],
        };
        let val = ClientDataset::new(1, vec![s1.clone(), s2.clone()]);
        let v = local_validate(&task, &w, &val).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let doubled = ClientDataset::new(1, vec![s1.clone(), s2.clone(), s1, s2]);
        assert!((local_validate(&task, &w, &doubled).unwrap() - 2.0 * v).abs() < 1e-12);
        let zero = ParamVec::new(vec![0.0], w.layout().clone()).unwrap();
        let exact = ClientDataset::new(
            1,
            vec![Sample {
                id: 0,
                group: 0,
                x: vec![2.0],
                y: vec![0.0],
            }],
        );
        assert_eq!(local_validate(&task, &zero, &exact).unwrap(), 0.0);
        assert!(local_validate(&task, &w, &ClientDataset::new(1, vec![])).is_err());
    }
}
