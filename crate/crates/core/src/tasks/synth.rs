use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{sigmoid, Objective, TaskKind, TaskModel};
use super::{ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::rng::{self, SimRng};
use crate::scalar::Scalar;

fn default_group_shift() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.1
}

fn default_empty_rate() -> f64 {
    0.1
}

/// Knobs of the synthetic data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    /// Distance between the teachers of consecutive groups (concept shift),
    /// or the contrast lost per group for voxel tasks.
    #[serde(default = "default_group_shift")]
    pub group_shift: f64,
    /// Target noise for regression tasks, voxel intensity noise scale for
    /// voxel tasks.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Probability that a voxel sample has an empty ground truth.
    #[serde(default = "default_empty_rate")]
    pub empty_rate: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            group_shift: default_group_shift(),
            noise: default_noise(),
            empty_rate: default_empty_rate(),
        }
    }
}

fn normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws a pool with `group_counts[g]` samples of group `g`. Sample ids are
/// pool positions.
pub fn generate_pool<T: Scalar>(
    task: &TaskModel,
    group_counts: &[usize],
    settings: &SynthSettings,
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    if group_counts.iter().sum::<usize>() == 0 {
        return Err(Error::Empty("pool must contain at least one sample".into()));
    }
    let mut teacher_rng = rng::derived_rng(seed, "teacher", &[]);
    let layout = Objective::<f64>::layout(task).clone();
    let dim = layout.dim();
    let base: Vec<f64> = (0..dim).map(|_| normal(&mut teacher_rng)).collect();
    let direction: Vec<f64> = {
        let d: Vec<f64> = (0..dim).map(|_| normal(&mut teacher_rng)).collect();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        d.into_iter().map(|v| v / n * (dim as f64).sqrt()).collect()
    };

    let mut pool = Vec::with_capacity(group_counts.iter().sum());
    for (group, &count) in group_counts.iter().enumerate() {
        let shift = settings.group_shift * group as f64;
        let teacher_vals: Vec<f64> = base.iter().zip(&direction).map(|(b, d)| b + shift * d).collect();
        let teacher = ParamVec::new(teacher_vals, layout.clone())?;
        let mut rng = rng::derived_rng(seed, "pool", &[group as u64]);
        for _ in 0..count {
            let id = pool.len();
            let (x, y) = draw(task, &teacher, group, settings, &mut rng)?;
            pool.push(Sample {
                id,
                group,
                x: x.into_iter().map(T::lit).collect(),
                y: y.into_iter().map(T::lit).collect(),
            });
        }
    }
    Ok(pool)
}

fn draw(
    task: &TaskModel,
    teacher: &ParamVec<f64>,
    group: usize,
    settings: &SynthSettings,
    rng: &mut SimRng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_features = task.feature_len();
    match task.kind() {
        TaskKind::LinearRegression { .. } | TaskKind::Mlp1Hidden { .. } => {
            let x: Vec<f64> = (0..n_features).map(|_| normal(rng)).collect();
            let probe = Sample {
                id: 0,
                group,
                x: x.clone(),
                y: vec![0.0; task.target_len()],
            };
            let y = teacher_output(task, teacher, &probe)?
                .into_iter()
                .map(|v| v + settings.noise * normal(rng))
                .collect();
            Ok((x, y))
        }
        TaskKind::LogisticRegression { inputs } => {
            let x: Vec<f64> = (0..n_features).map(|_| normal(rng)).collect();
            let w = teacher.values();
            let z: f64 = w[..*inputs].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + w[*inputs];
            let p = sigmoid(2.0 * z);
            let y = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            Ok((x, vec![y]))
        }
        TaskKind::VoxelDice { channels, grid, .. } => {
            let [gx, gy, gz] = *grid;
            let mut gt = vec![0.0; gx * gy * gz];
            if rng.random::<f64>() >= settings.empty_rate {
                let c = [
                    rng.random_range(0.0..gx as f64),
                    rng.random_range(0.0..gy as f64),
                    rng.random_range(0.0..gz as f64),
                ];
                let r = rng.random_range(1.0..(gx.min(gy).min(gz) as f64 / 2.0).max(1.5));
                for i in 0..gx {
                    for j in 0..gy {
                        for k in 0..gz {
                            let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                            if d2 <= r * r {
                                gt[(i * gy + j) * gz + k] = 1.0;
                            }
                        }
                    }
                }
            }
            // odd channels lose contrast with the group index
            let contrast: Vec<f64> = (0..*channels)
                .map(|c| {
                    if c % 2 == 1 {
                        (1.5 - settings.group_shift * group as f64).max(0.0)
                    } else {
                        1.5
                    }
                })
                .collect();
            let sd = settings.noise.max(0.0) * 10.0;
            let mut x = Vec::with_capacity(n_features);
            for &g in &gt {
                for &m in &contrast {
                    x.push(m * g + sd * normal(rng));
                }
            }
            Ok((x, gt))
        }
    }
}

fn teacher_output(task: &TaskModel, teacher: &ParamVec<f64>, s: &Sample<f64>) -> Result<Vec<f64>> {
    let w = teacher.values();
    match task.kind() {
        TaskKind::LinearRegression { inputs, bias } => {
            let b = if *bias { w[*inputs] } else { 0.0 };
            Ok(vec![w[..*inputs].iter().zip(&s.x).map(|(a, b)| a * b).sum::<f64>() + b])
        }
        TaskKind::Mlp1Hidden {
            inputs,
            hidden,
            outputs,
        } => {
            let (ni, nh, no) = (*inputs, *hidden, *outputs);
            let off2 = nh * ni + nh;
            let h: Vec<f64> = (0..nh)
                .map(|j| {
                    let z: f64 = w[j * ni..(j + 1) * ni].iter().zip(&s.x).map(|(a, b)| a * b).sum();
                    (z + w[nh * ni + j]).tanh()
                })
                .collect();
            Ok((0..no)
                .map(|o| {
                    let row = &w[off2 + o * nh..off2 + (o + 1) * nh];
                    row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + w[off2 + no * nh + o]
                })
                .collect())
        }
        _ => Err(Error::InvalidArgument(
            "teacher output only defined for regression tasks".into(),
        )),
    }
}

/// Adds a per-client offset to every feature (scanner-style feature shift).
/// For voxel tasks the offset is per channel.
pub fn shift_features<T: Scalar>(data: &mut ClientDataset<T>, offset: &[T]) -> Result<()> {
    if offset.is_empty() {
        return Err(Error::Empty("feature offset".into()));
    }
    for s in &mut data.samples {
        if s.x.len() % offset.len() != 0 {
            return Err(Error::DimensionMismatch {
                index: s.id,
                expected: offset.len(),
                found: s.x.len(),
            });
        }
        for chunk in s.x.chunks_mut(offset.len()) {
            for (v, &o) in chunk.iter_mut().zip(offset) {
                *v = *v + o;
            }
        }
    }
    Ok(())
}
