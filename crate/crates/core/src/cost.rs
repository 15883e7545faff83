//! Step, communication and simulated wall-clock accounting.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConstants {
    /// Seconds per SGD batch.
    pub t_batch: f64,
    /// Seconds per validation sample.
    pub t_eval: f64,
    /// Bytes per second.
    pub download_rate: f64,
    pub upload_rate: f64,
    /// Floats in the full model.
    pub model_floats: f64,
    pub bytes_per_float: f64,
}

impl Default for CostConstants {
    fn default() -> Self {
        Self {
            t_batch: 1.86,
            t_eval: 0.80,
            download_rate: 20e6,
            upload_rate: 13.3e6,
            model_floats: 22.5e6,
            bytes_per_float: 4.0,
        }
    }
}

impl CostConstants {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_batch", self.t_batch),
            ("t_eval", self.t_eval),
            ("download_rate", self.download_rate),
            ("upload_rate", self.upload_rate),
            ("model_floats", self.model_floats),
            ("bytes_per_float", self.bytes_per_float),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("cost constant {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Work of one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientLoad {
    pub steps: u64,
    pub eval: u64,
}

impl ClientLoad {
    pub fn new(steps: u64, eval: u64) -> Self {
        Self { steps, eval }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub rounds: u64,
    pub clients: Vec<ClientLoad>,
    /// Floats sent to each client per round.
    pub floats_down: f64,
    /// Floats received from each client per round.
    pub floats_up: f64,
}

impl RoundPlan {
    pub fn new(rounds: u64, clients: Vec<ClientLoad>, floats_down: f64, floats_up: f64) -> Result<Self> {
        let plan = Self {
            rounds,
            clients,
            floats_down,
            floats_up,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Same payload both ways.
    pub fn symmetric(rounds: u64, clients: Vec<ClientLoad>, floats: f64) -> Result<Self> {
        Self::new(rounds, clients, floats, floats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("a round plan needs at least one round".into()));
        }
        if self.clients.is_empty() {
            return Err(Error::Empty("round plan clients".into()));
        }
        for (name, v) in [("floats_down", self.floats_down), ("floats_up", self.floats_up)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a nonnegative count, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `(R·Σ s_k, R·max s_k)`.
pub fn step_totals(plan: &RoundPlan) -> (u64, u64) {
    let sum: u64 = plan.clients.iter().map(|c| c.steps).sum();
    let max = plan.clients.iter().map(|c| c.steps).max().unwrap_or(0);
    (plan.rounds * sum, plan.rounds * max)
}

/// Floats on the per-round critical path: one download plus one upload.
pub fn communication_total(plan: &RoundPlan) -> f64 {
    plan.rounds as f64 * (plan.floats_down + plan.floats_up)
}

/// Seconds, with every round waiting for its slowest client.
pub fn simulated_time(plan: &RoundPlan, c: &CostConstants) -> f64 {
    let comm =
        plan.floats_down * c.bytes_per_float / c.download_rate + plan.floats_up * c.bytes_per_float / c.upload_rate;
    let slowest = plan
        .clients
        .iter()
        .map(|l| l.steps as f64 * c.t_batch + l.eval as f64 * c.t_eval + comm)
        .fold(0.0, f64::max);
    plan.rounds as f64 * slowest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub name: String,
    pub total_steps: u64,
    pub parallel_steps: u64,
    pub floats: f64,
    pub seconds: f64,
}

impl PhaseCost {
    pub fn of(name: impl Into<String>, plan: &RoundPlan, c: &CostConstants) -> Self {
        let (total_steps, parallel_steps) = step_totals(plan);
        Self {
            name: name.into(),
            total_steps,
            parallel_steps,
            floats: communication_total(plan),
            seconds: simulated_time(plan, c),
        }
    }
}

/// Phases add up: a finetuning method pays for its global training too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub algorithm: String,
    pub phases: Vec<PhaseCost>,
    pub total_steps: u64,
    pub parallel_steps: u64,
    pub floats: f64,
    pub seconds: f64,
}

impl CostReport {
    pub fn new(algorithm: impl Into<String>, phases: Vec<PhaseCost>) -> Self {
        Self {
            algorithm: algorithm.into(),
            total_steps: phases.iter().map(|p| p.total_steps).sum(),
            parallel_steps: phases.iter().map(|p| p.parallel_steps).sum(),
            floats: phases.iter().map(|p| p.floats).sum(),
            seconds: phases.iter().map(|p| p.seconds).sum(),
            phases,
        }
    }

    pub fn hours(&self) -> f64 {
        self.seconds / 3600.0
    }

    pub fn floats_e9(&self) -> f64 {
        self.floats / 1e9
    }
}

/// Settings behind the per-algorithm comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSettings {
    pub rounds: u64,
    pub fixed_iteration_rounds: u64,
    pub fixed_iteration_steps: u64,
    pub finetune_epochs: u64,
    /// Floats kept local by LG-FedAvg (the first layers).
    pub lg_private_floats: f64,
    /// Floats kept local by FedPer (the last layers).
    pub fedper_private_floats: f64,
}

impl Default for TableSettings {
    fn default() -> Self {
        Self {
            rounds: 300,
            fixed_iteration_rounds: 720,
            fixed_iteration_steps: 10,
            finetune_epochs: 30,
            // four 3x3x3 conv layers at 32/64 channels at either end of the U-Net
            lg_private_floats: 197_000.0,
            fedper_private_floats: 30_000.0,
        }
    }
}

/// One row per benchmarked algorithm from per-client epoch loads and the
/// pooled centralized load.
pub fn comparison_table(
    clients: &[ClientLoad],
    pooled: ClientLoad,
    c: &CostConstants,
    t: &TableSettings,
) -> Result<Vec<CostReport>> {
    c.validate()?;
    let s = c.model_floats;
    let largest = *clients
        .iter()
        .max_by_key(|l| (l.steps, l.eval))
        .ok_or_else(|| Error::Empty("client loads".into()))?;
    let fed = |floats: f64| RoundPlan::symmetric(t.rounds, clients.to_vec(), floats);
    let fedavg = PhaseCost::of("federated", &fed(s)?, c);
    let one = |name: &str, phase: &PhaseCost| CostReport::new(name, vec![phase.clone()]);

    let mut rows = vec![
        one(
            "local_institution",
            &PhaseCost::of("local", &RoundPlan::symmetric(t.rounds, vec![largest], 0.0)?, c),
        ),
        one(
            "centralized",
            &PhaseCost::of("pooled", &RoundPlan::symmetric(t.rounds, vec![pooled], 0.0)?, c),
        ),
        one("fedavg_fixed_epochs", &fedavg),
    ];
    let iters: Vec<ClientLoad> = clients
        .iter()
        .map(|l| ClientLoad::new(t.fixed_iteration_steps, l.eval))
        .collect();
    rows.push(one(
        "fedavg_fixed_iterations",
        &PhaseCost::of(
            "federated",
            &RoundPlan::symmetric(t.fixed_iteration_rounds, iters, s)?,
            c,
        ),
    ));
    for name in ["fednova", "fedadam", "fedpidavg", "qfedavg"] {
        rows.push(one(name, &fedavg));
    }
    rows.push(one("scaffold", &PhaseCost::of("federated", &fed(2.0 * s)?, c)));
    let local = PhaseCost::of(
        "local_finetuning",
        &RoundPlan::symmetric(t.finetune_epochs, clients.to_vec(), 0.0)?,
        c,
    );
    for name in ["local_finetuning", "ditto"] {
        rows.push(CostReport::new(name, vec![fedavg.clone(), local.clone()]));
    }
    rows.push(one(
        "fedper",
        &PhaseCost::of("federated", &fed(s - t.fedper_private_floats)?, c),
    ));
    rows.push(one(
        "lg_fedavg",
        &PhaseCost::of("federated", &fed(s - t.lg_private_floats)?, c),
    ));
    rows.push(one("cfl", &fedavg));
    rows.push(one("prior_cfl", &fedavg));
    Ok(rows)
}

/// Aligned text table.
pub fn format_table(rows: &[CostReport]) -> String {
    let width = rows
        .iter()
        .map(|r| r.algorithm.len())
        .max()
        .unwrap_or(0)
        .max("algorithm".len());
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>12}  {:>14}  {:>12}  {:>9}",
        "algorithm", "total_steps", "parallel_steps", "floats_1e9", "hours"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>14}  {:>12.1}  {:>9.1}",
            r.algorithm,
            r.total_steps,
            r.parallel_steps,
            r.floats_e9(),
            r.hours()
        );
    }
    s
}

pub fn write_csv<W: Write>(rows: &[CostReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "algorithm",
        "total_steps",
        "parallel_steps",
        "floats",
        "seconds",
        "hours",
    ])?;
    for r in rows {
        out.write_record([
            r.algorithm.clone(),
            r.total_steps.to_string(),
            r.parallel_steps.to_string(),
            r.floats.to_string(),
            r.seconds.to_string(),
            r.hours().to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(k: usize, steps: u64, eval: u64) -> Vec<ClientLoad> {
        vec![ClientLoad::new(steps, eval); k]
    }

    #[test]
    fn step_examples() {
        let p = RoundPlan::symmetric(720, uniform(23, 10, 0), 0.0).unwrap();
        assert_eq!(step_totals(&p), (165_600, 7_200));
        let p = RoundPlan::symmetric(5, uniform(1, 7, 0), 0.0).unwrap();
        let (t, q) = step_totals(&p);
        assert_eq!(t, q);
        let p = RoundPlan::symmetric(300, vec![ClientLoad::new(82, 0), ClientLoad::new(50, 0)], 0.0).unwrap();
        assert_eq!(step_totals(&p), (39_600, 24_600));
    }

    #[test]
    fn communication_examples() {
        let p = RoundPlan::symmetric(300, uniform(23, 1, 0), 22.5e6).unwrap();
        assert_eq!(communication_total(&p), 1.35e10);
        let p = RoundPlan::symmetric(300, uniform(23, 1, 0), 45e6).unwrap();
        assert_eq!(communication_total(&p), 2.7e10);
        let p = RoundPlan::symmetric(1, uniform(1, 1, 0), 1.0).unwrap();
        assert_eq!(communication_total(&p), 2.0);
    }

    #[test]
    fn time_examples() {
        let c = CostConstants::default();
        let p = RoundPlan::symmetric(10, uniform(3, 0, 0), 22.5e6).unwrap();
        let per = 90e6 / 20e6 + 90e6 / 13.3e6;
        assert!((simulated_time(&p, &c) - 10.0 * per).abs() < 1e-9);
        let p = RoundPlan::symmetric(4, uniform(1, 1, 0), 0.0).unwrap();
        assert!((simulated_time(&p, &c) - 4.0 * 1.86).abs() < 1e-12);
        let p = RoundPlan::symmetric(300, vec![ClientLoad::new(82, 82), ClientLoad::new(3, 3)], 22.5e6).unwrap();
        let want = 300.0 * (82.0 * 1.86 + 82.0 * 0.80 + per);
        let got = simulated_time(&p, &c);
        assert!((got - want).abs() < 1e-6);
        assert!((got / 3600.0 - 19.1).abs() < 0.05);
    }

    #[test]
    fn phases_add() {
        let c = CostConstants::default();
        let a = PhaseCost::of(
            "a",
            &RoundPlan::symmetric(300, vec![ClientLoad::new(82, 82), ClientLoad::new(116, 0)], 1.0).unwrap(),
            &c,
        );
        let b = PhaseCost::of(
            "b",
            &RoundPlan::symmetric(30, vec![ClientLoad::new(82, 82), ClientLoad::new(116, 0)], 0.0).unwrap(),
            &c,
        );
        let r = CostReport::new("x", vec![a.clone(), b.clone()]);
        assert_eq!(r.total_steps, a.total_steps + b.total_steps);
        assert_eq!(r.seconds, a.seconds + b.seconds);
    }

    #[test]
    fn invalid_plans() {
        assert!(RoundPlan::symmetric(0, uniform(1, 1, 1), 0.0).is_err());
        assert!(RoundPlan::symmetric(1, vec![], 0.0).is_err());
        assert!(RoundPlan::symmetric(1, uniform(1, 1, 1), -1.0).is_err());
        let c = CostConstants {
            t_batch: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn table_renders() {
        let rows = comparison_table(
            &uniform(3, 5, 2),
            ClientLoad::new(15, 6),
            &CostConstants::default(),
            &TableSettings::default(),
        )
        .unwrap();
        let text = format_table(&rows);
        assert!(text.lines().count() == rows.len() + 1);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), rows.len() + 1);
    }

    fn plan_strategy() -> impl Strategy<Value = RoundPlan> {
        (
            1u64..500,
            proptest::collection::vec((0u64..200, 0u64..200), 1..10),
            0.0f64..1e8,
            0.0f64..1e8,
        )
            .prop_map(|(r, loads, d, u)| {
                RoundPlan::new(r, loads.into_iter().map(|(s, e)| ClientLoad::new(s, e)).collect(), d, u).unwrap()
            })
    }

    proptest! {
        #[test]
        fn linear_in_rounds(p in plan_strategy(), m in 1u64..5) {
            let q = RoundPlan { rounds: p.rounds * m, ..p.clone() };
            let (t, par) = step_totals(&p);
            prop_assert_eq!(step_totals(&q), (m * t, m * par));
            let (a, b) = (communication_total(&q), m as f64 * communication_total(&p));
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        #[test]
        fn time_monotone(p in plan_strategy(), k in 0usize..10, extra in 1u64..50, slow in 1.0f64..3.0) {
            let c = CostConstants::default();
            let base = simulated_time(&p, &c);
            let mut q = p.clone();
            let i = k % q.clients.len();
            q.clients[i].steps += extra;
            prop_assert!(simulated_time(&q, &c) >= base);
            let mut q = p.clone();
            q.clients[i].eval += extra;
            prop_assert!(simulated_time(&q, &c) >= base);
            let q = RoundPlan { floats_up: p.floats_up + extra as f64, ..p.clone() };
            prop_assert!(simulated_time(&q, &c) >= base);
            let c2 = CostConstants { t_batch: c.t_batch * slow, t_eval: c.t_eval * slow, upload_rate: c.upload_rate / slow, ..c };
            prop_assert!(simulated_time(&p, &c2) >= base);
        }

        #[test]
        fn balanced_total_is_k_parallel(k in 1usize..30, s in 0u64..100, r in 1u64..100) {
            let p = RoundPlan::symmetric(r, uniform(k, s, 1), 0.0).unwrap();
            let (t, par) = step_totals(&p);
            prop_assert_eq!(t, k as u64 * par);
        }
    }
}
