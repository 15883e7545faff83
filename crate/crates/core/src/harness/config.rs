use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::CostConstants;
use crate::error::{Error, Result};
use crate::tasks::{ProfileEntry, SynthSettings, TaskKind};
use crate::trainer::{Budget, TrainerConfig};

/// Everything one experiment needs. Unset fields fall back to the benchmark
/// defaults of the selected algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub data: DataConfig,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub trainer: TrainerSettings,
    /// Communication rounds (or epochs for single-model baselines).
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub folds: FoldSettings,
    /// Worker threads for client updates. Results do not depend on it.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub cost: CostConstants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub partition: PartitionSpec,
    pub synth: SynthSettings,
    /// Client `k` gets its features offset by `feature_shift·(k−1)/K` per
    /// channel (covariate shift on top of any group mix).
    pub feature_shift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            partition: PartitionSpec::Challenge,
            synth: SynthSettings::default(),
            feature_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    /// Balanced random repartition of `samples` over `clients`.
    Iid {
        clients: usize,
        samples: usize,
        /// Fraction of the pool drawn from each group (default all group 0).
        #[serde(default)]
        group_mix: Option<Vec<f64>>,
    },
    /// Explicit per-client counts and mixes.
    Profile { entries: Vec<ProfileEntry> },
    /// The 23-institution challenge layout.
    Challenge,
    /// The 18-institution limited layout.
    Limited,
    /// `n_i = max(smallest, round(largest·i^−exponent))`; client `i` draws
    /// from group `(i−1) mod groups`.
    PowerLaw {
        clients: usize,
        largest: usize,
        smallest: usize,
        exponent: f64,
        #[serde(default = "one")]
        groups: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSettings {
    /// Local learning rate; the algorithm's default when unset.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// 0.995 when unset, except for q-FedAvg which runs without decay.
    pub lr_decay_factor: Option<f64>,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        Self {
            learning_rate: None,
            batch_size: 4,
            weight_decay: 1e-5,
            lr_decay_factor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FoldChoice {
    Index(usize),
    All(AllFolds),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllFolds {
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSettings {
    pub n_folds: usize,
    pub val_frac: f64,
    pub fold: FoldChoice,
}

impl Default for FoldSettings {
    fn default() -> Self {
        Self {
            n_folds: 5,
            val_frac: 0.2,
            fold: FoldChoice::Index(0),
        }
    }
}

impl FoldSettings {
    pub fn selected(&self) -> Vec<usize> {
        match self.fold {
            FoldChoice::Index(f) => vec![f],
            FoldChoice::All(_) => (0..self.n_folds).collect(),
        }
    }
}

/// Where a finetuning-style method gets its starting model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// A checkpoint written by an earlier run.
    Checkpoint(PathBuf),
    /// Weighted FedAvg for this many rounds, keeping the best-validation model.
    PretrainRounds(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Weighted,
    Uniform,
}

/// How prior clusters are assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ClusterLabels {
    /// Each client's most frequent sample group (ties to the lower group).
    DominantGroup,
    Explicit(#[serde(deserialize_with = "int_keys")] BTreeMap<usize, String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Algorithm {
    Centralized,
    /// One institution trains alone.
    LocalOnly {
        client_id: usize,
    },
    FedavgFixedEpochs {
        #[serde(default = "one")]
        epochs: usize,
        #[serde(default = "weighted")]
        weighting: Weighting,
    },
    FedavgUniform {
        #[serde(default = "one")]
        epochs: usize,
    },
    FedavgFixedIterations {
        #[serde(default = "ten")]
        iterations: usize,
    },
    Fednova {
        #[serde(default = "one")]
        epochs: usize,
    },
    Fedadam {
        #[serde(default = "server_lr")]
        server_lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "tau")]
        tau: f64,
    },
    Scaffold {
        #[serde(default = "one")]
        epochs: usize,
    },
    Qfedavg {
        #[serde(default = "q")]
        q: f64,
    },
    Fedpidavg {
        #[serde(default = "pid_alpha")]
        alpha: f64,
        #[serde(default = "pid_alpha")]
        beta: f64,
        #[serde(default = "pid_gamma")]
        gamma: f64,
    },
    LocalFinetuning {
        #[serde(default = "finetune_epochs")]
        epochs: usize,
        #[serde(default = "finetune_source")]
        source: Source,
        #[serde(default, deserialize_with = "int_keys")]
        client_learning_rates: BTreeMap<usize, f64>,
        #[serde(default = "fedavg_lr")]
        pretrain_learning_rate: f64,
    },
    Ditto {
        #[serde(default = "ditto_lambda")]
        lambda: f64,
        #[serde(default = "finetune_epochs")]
        epochs: usize,
        #[serde(default = "finetune_source")]
        source: Source,
        #[serde(default, deserialize_with = "int_keys")]
        client_learning_rates: BTreeMap<usize, f64>,
        #[serde(default = "fedavg_lr")]
        pretrain_learning_rate: f64,
    },
    Fedper {
        #[serde(default)]
        n_private: Option<usize>,
    },
    LgFedavg {
        #[serde(default)]
        n_private: Option<usize>,
    },
    Cfl {
        /// Round → cluster ids split after that round's aggregation.
        #[serde(default = "cfl_schedule", deserialize_with = "int_keys")]
        schedule: BTreeMap<usize, Vec<usize>>,
    },
    PriorCfl {
        #[serde(default = "dominant")]
        labels: ClusterLabels,
        #[serde(default = "prior_source")]
        source: Source,
        #[serde(default = "fedavg_lr")]
        pretrain_learning_rate: f64,
    },
}

fn weighted() -> Weighting {
    Weighting::Weighted
}
fn ten() -> usize {
    10
}
fn server_lr() -> f64 {
    0.001
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn tau() -> f64 {
    1e-8
}
fn q() -> f64 {
    1.0
}
fn pid_alpha() -> f64 {
    0.45
}
fn pid_gamma() -> f64 {
    0.1
}
fn finetune_epochs() -> usize {
    30
}
fn finetune_source() -> Source {
    Source::PretrainRounds(300)
}
fn prior_source() -> Source {
    Source::PretrainRounds(270)
}
fn fedavg_lr() -> f64 {
    0.4
}
fn ditto_lambda() -> f64 {
    0.1
}
/// Integer-keyed maps inside tagged enums reach the deserializer with string
/// keys, so parse them by hand.
fn int_keys<'de, D, V>(d: D) -> std::result::Result<BTreeMap<usize, V>, D::Error>
where
    D: serde::Deserializer<'de>,
    V: Deserialize<'de>,
{
    let raw = BTreeMap::<String, V>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse()
                .map(|k| (k, v))
                .map_err(|_| serde::de::Error::custom(format!("expected an integer key, found `{k}`")))
        })
        .collect()
}

fn cfl_schedule() -> BTreeMap<usize, Vec<usize>> {
    [(200, vec![0])].into_iter().collect()
}
fn dominant() -> ClusterLabels {
    ClusterLabels::DominantGroup
}

impl Algorithm {
    pub fn id(&self) -> &'static str {
        match self {
            Algorithm::Centralized => "centralized",
            Algorithm::LocalOnly { .. } => "local_only",
            Algorithm::FedavgFixedEpochs { .. } => "fedavg_fixed_epochs",
            Algorithm::FedavgUniform { .. } => "fedavg_uniform",
            Algorithm::FedavgFixedIterations { .. } => "fedavg_fixed_iterations",
            Algorithm::Fednova { .. } => "fednova",
            Algorithm::Fedadam { .. } => "fedadam",
            Algorithm::Scaffold { .. } => "scaffold",
            Algorithm::Qfedavg { .. } => "qfedavg",
            Algorithm::Fedpidavg { .. } => "fedpidavg",
            Algorithm::LocalFinetuning { .. } => "local_finetuning",
            Algorithm::Ditto { .. } => "ditto",
            Algorithm::Fedper { .. } => "fedper",
            Algorithm::LgFedavg { .. } => "lg_fedavg",
            Algorithm::Cfl { .. } => "cfl",
            Algorithm::PriorCfl { .. } => "prior_cfl",
        }
    }

    /// Selected local learning rates of the benchmark.
    pub fn default_learning_rate(&self) -> f64 {
        match self {
            Algorithm::Centralized | Algorithm::LocalOnly { .. } => 0.1,
            Algorithm::Fednova { .. } => 0.2,
            Algorithm::Fedadam { .. } => 0.1,
            Algorithm::LgFedavg { .. } => 0.2,
            Algorithm::PriorCfl { .. } => 0.1,
            // per institution in the benchmark; one shared starting value here
            Algorithm::LocalFinetuning { .. } | Algorithm::Ditto { .. } => 0.1,
            _ => 0.4,
        }
    }

    pub fn default_rounds(&self) -> usize {
        match self {
            Algorithm::FedavgFixedIterations { .. } => 720,
            Algorithm::PriorCfl { .. } => 30,
            _ => 300,
        }
    }

    pub fn default_decay(&self) -> f64 {
        match self {
            Algorithm::Qfedavg { .. } => 1.0,
            _ => 0.995,
        }
    }

    /// Local budget per round.
    pub fn budget(&self) -> Budget {
        match self {
            Algorithm::FedavgFixedEpochs { epochs, .. }
            | Algorithm::FedavgUniform { epochs }
            | Algorithm::Fednova { epochs }
            | Algorithm::Scaffold { epochs } => Budget::Epochs(*epochs),
            Algorithm::FedavgFixedIterations { iterations } => Budget::Iterations(*iterations),
            _ => Budget::Epochs(1),
        }
    }

    pub fn is_personalized(&self) -> bool {
        matches!(
            self,
            Algorithm::LocalFinetuning { .. }
                | Algorithm::Ditto { .. }
                | Algorithm::Fedper { .. }
                | Algorithm::LgFedavg { .. }
                | Algorithm::Cfl { .. }
                | Algorithm::PriorCfl { .. }
        )
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn rounds(&self) -> usize {
        self.rounds.unwrap_or_else(|| self.algorithm.default_rounds())
    }

    pub fn learning_rate(&self) -> f64 {
        self.trainer
            .learning_rate
            .unwrap_or_else(|| self.algorithm.default_learning_rate())
    }

    /// Local trainer settings at the start of the run.
    pub fn trainer_config(&self) -> TrainerConfig<f64> {
        TrainerConfig {
            learning_rate: self.learning_rate(),
            batch_size: self.trainer.batch_size,
            weight_decay: self.trainer.weight_decay,
            lr_decay_factor: self
                .trainer
                .lr_decay_factor
                .unwrap_or_else(|| self.algorithm.default_decay()),
            budget: self.algorithm.budget(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds() == 0 {
            return bad("rounds must be at least 1".into());
        }
        self.trainer_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.cost.validate()?;
        if self.folds.n_folds < 2 {
            return bad(format!("n_folds must be at least 2, got {}", self.folds.n_folds));
        }
        if !(0.0..1.0).contains(&self.folds.val_frac) {
            return bad(format!("val_frac must be in [0, 1), got {}", self.folds.val_frac));
        }
        if let FoldChoice::Index(f) = self.folds.fold {
            if f >= self.folds.n_folds {
                return bad(format!("fold {f} out of range for {} folds", self.folds.n_folds));
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if !self.data.feature_shift.is_finite() {
            return bad("feature_shift must be finite".into());
        }
        match &self.algorithm {
            Algorithm::FedavgFixedEpochs { epochs, .. }
            | Algorithm::FedavgUniform { epochs }
            | Algorithm::Fednova { epochs }
            | Algorithm::Scaffold { epochs }
                if *epochs == 0 =>
            {
                bad("local epochs must be at least 1".into())
            }
            Algorithm::FedavgFixedIterations { iterations: 0 } => bad("local iterations must be at least 1".into()),
            Algorithm::Fedadam {
                server_lr,
                beta1,
                beta2,
                tau,
            } => {
                if !(*server_lr > 0.0) || !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || !(*tau >= 0.0) {
                    bad("FedAdam needs server_lr > 0, β₁, β₂ in [0, 1) and τ ≥ 0".into())
                } else {
                    Ok(())
                }
            }
            Algorithm::Qfedavg { q } if !(*q >= 0.0) || !q.is_finite() => bad(format!("q must be ≥ 0, got {q}")),
            Algorithm::Fedpidavg { alpha, beta, gamma } => crate::aggregation::PidState::new(*alpha, *beta, *gamma)
                .map(|_| ())
                .map_err(|e| Error::Config(e.to_string())),
            Algorithm::LocalFinetuning {
                client_learning_rates,
                pretrain_learning_rate,
                source,
                ..
            }
            | Algorithm::Ditto {
                client_learning_rates,
                pretrain_learning_rate,
                source,
                ..
            } => {
                if let Algorithm::Ditto { lambda, .. } = &self.algorithm {
                    if !(*lambda >= 0.0) {
                        return bad(format!("Ditto λ must be ≥ 0, got {lambda}"));
                    }
                }
                if client_learning_rates.values().any(|lr| !(*lr > 0.0)) || !(*pretrain_learning_rate > 0.0) {
                    return bad("learning rates must be positive".into());
                }
                check_source(source)
            }
            Algorithm::PriorCfl {
                labels,
                source,
                pretrain_learning_rate,
            } => {
                if let ClusterLabels::Explicit(map) = labels {
                    if let Some((c, _)) = map.iter().find(|(_, l)| l.trim().is_empty()) {
                        return bad(format!("client {c} has an empty cluster label"));
                    }
                }
                if !(*pretrain_learning_rate > 0.0) {
                    return bad("learning rates must be positive".into());
                }
                check_source(source)
            }
            _ => Ok(()),
        }
    }
}

fn check_source(source: &Source) -> Result<()> {
    match source {
        Source::PretrainRounds(0) => Err(Error::Config("pretrain_rounds must be at least 1".into())),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"task": {"kind": "logistic_regression", "inputs": 4}, "algorithm": {"name": "fednova"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.rounds(), 300);
        assert_eq!(cfg.learning_rate(), 0.2);
        assert_eq!(cfg.trainer_config().lr_decay_factor, 0.995);
        assert_eq!(cfg.data.partition, PartitionSpec::Challenge);
        assert_eq!(cfg.folds.selected(), vec![0]);
    }

    #[test]
    fn benchmark_defaults() {
        let parse = |a: &str| {
            ExperimentConfig::from_json(&format!(
                r#"{{"task": {{"kind": "logistic_regression", "inputs": 4}}, "algorithm": {a}}}"#
            ))
            .unwrap()
        };
        let c = parse(r#"{"name": "qfedavg"}"#);
        assert_eq!((c.learning_rate(), c.trainer_config().lr_decay_factor), (0.4, 1.0));
        assert_eq!(c.algorithm, Algorithm::Qfedavg { q: 1.0 });
        let c = parse(r#"{"name": "fedavg_fixed_iterations"}"#);
        assert_eq!((c.rounds(), c.trainer_config().budget), (720, Budget::Iterations(10)));
        let c = parse(r#"{"name": "prior_cfl"}"#);
        assert_eq!((c.rounds(), c.learning_rate()), (30, 0.1));
        let c = parse(r#"{"name": "fedadam"}"#);
        assert_eq!(
            c.algorithm,
            Algorithm::Fedadam {
                server_lr: 0.001,
                beta1: 0.9,
                beta2: 0.999,
                tau: 1e-8
            }
        );
        let c = parse(r#"{"name": "cfl"}"#);
        let Algorithm::Cfl { schedule } = &c.algorithm else {
            panic!()
        };
        assert_eq!(schedule[&200], vec![0]);
        let c = parse(r#"{"name": "ditto", "source": {"checkpoint": "w.params"}}"#);
        assert!(matches!(
            c.algorithm,
            Algorithm::Ditto {
                source: Source::Checkpoint(_),
                ..
            }
        ));
    }

    #[test]
    fn rejects_bad_configs() {
        let base =
            r#"{"task": {"kind": "logistic_regression", "inputs": 4}, "algorithm": {"name": "fedavg_fixed_epochs"}"#;
        for extra in [
            r#", "rounds": 0"#,
            r#", "trainer": {"learning_rate": -1}"#,
            r#", "folds": {"fold": 7}"#,
            r#", "workers": 0"#,
            r#", "bogus": 1"#,
        ] {
            let err = ExperimentConfig::from_json(&format!("{base}{extra}}}")).unwrap_err();
            assert!(err.is_config(), "{extra}: {err}");
        }
        let err = ExperimentConfig::from_json(
            r#"{"task": {"kind": "logistic_regression", "inputs": 4}, "algorithm": {"name": "fedmagic"}}"#,
        )
        .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn all_folds() {
        let c = ExperimentConfig::from_json(
            r#"{"task": {"kind": "logistic_regression", "inputs": 4}, "algorithm": {"name": "centralized"}, "folds": {"fold": "all", "n_folds": 3}}"#,
        )
        .unwrap();
        assert_eq!(c.folds.selected(), vec![0, 1, 2]);
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::from_json(
            r#"{"task": {"kind": "voxel_dice", "channels": 2}, "algorithm": {"name": "prior_cfl", "labels": {"explicit": {"1": "a", "2": "b"}}}, "data": {"partition": {"kind": "power_law", "clients": 5, "largest": 40, "smallest": 5, "exponent": 1.0}}}"#,
        )
        .unwrap();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
