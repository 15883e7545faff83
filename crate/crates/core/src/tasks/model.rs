use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dice::soft_dice_loss;
use super::Sample;
use crate::error::{Error, Result};
use crate::param::{BlockMap, ParamVec};
use crate::rng;
use crate::scalar::Scalar;

/// Anything local SGD can minimise: a mean loss over a batch with its gradient.
pub trait Objective<T: Scalar>: Sync {
    fn layout(&self) -> &BlockMap;

    /// Mean loss over `batch` and the gradient of that mean.
    fn loss_and_grad(&self, w: &ParamVec<T>, batch: &[&Sample<T>]) -> Result<(T, ParamVec<T>)>;

    /// Loss of a single sample.
    fn sample_loss(&self, w: &ParamVec<T>, sample: &Sample<T>) -> Result<T>;
}

fn default_true() -> bool {
    true
}

fn default_dice_eps() -> f64 {
    1.0
}

fn default_grid() -> [usize; 3] {
    [8, 8, 8]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// `½(w·x + b − y)²`
    LinearRegression {
        inputs: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Binary cross-entropy on `σ(w·x + b)`.
    LogisticRegression { inputs: usize },
    /// `tanh` hidden layer, linear output, squared loss.
    #[serde(rename = "mlp_1hidden")]
    Mlp1Hidden {
        inputs: usize,
        hidden: usize,
        outputs: usize,
    },
    /// Per-voxel linear classifier with a sigmoid, trained with soft Dice.
    VoxelDice {
        channels: usize,
        #[serde(default = "default_grid")]
        grid: [usize; 3],
        #[serde(default = "default_dice_eps")]
        epsilon: f64,
    },
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::LinearRegression { .. } => "linear_regression",
            TaskKind::LogisticRegression { .. } => "logistic_regression",
            TaskKind::Mlp1Hidden { .. } => "mlp_1hidden",
            TaskKind::VoxelDice { .. } => "voxel_dice",
        }
    }
}

/// A task together with its parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    kind: TaskKind,
    layout: BlockMap,
}

impl TaskModel {
    pub fn new(kind: TaskKind) -> Result<Self> {
        let positive = |n: usize, what: &str| {
            if n == 0 {
                Err(Error::InvalidArgument(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        let layout = match &kind {
            TaskKind::LinearRegression { inputs, bias } => {
                positive(*inputs, "inputs")?;
                if *bias {
                    BlockMap::from_lengths([("weight", *inputs), ("bias", 1)])?
                } else {
                    BlockMap::from_lengths([("weight", *inputs)])?
                }
            }
            TaskKind::LogisticRegression { inputs } => {
                positive(*inputs, "inputs")?;
                BlockMap::from_lengths([("weight", *inputs), ("bias", 1)])?
            }
            TaskKind::Mlp1Hidden {
                inputs,
                hidden,
                outputs,
            } => {
                positive(*inputs, "inputs")?;
                positive(*hidden, "hidden")?;
                positive(*outputs, "outputs")?;
                BlockMap::from_lengths([
                    ("layer1_w", hidden * inputs),
                    ("layer1_b", *hidden),
                    ("layer2_w", outputs * hidden),
                    ("layer2_b", *outputs),
                ])?
            }
            TaskKind::VoxelDice {
                channels,
                grid,
                epsilon,
            } => {
                positive(*channels, "channels")?;
                if grid.contains(&0) {
                    return Err(Error::InvalidArgument("grid extents must be positive".into()));
                }
                if !(*epsilon > 0.0) {
                    return Err(Error::InvalidArgument("dice smoothing must be positive".into()));
                }
                BlockMap::from_lengths([("weight", *channels), ("bias", 1)])?
            }
        };
        Ok(Self { kind, layout })
    }

    pub fn kind(&self) -> &TaskKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Length of a sample's feature array.
    pub fn feature_len(&self) -> usize {
        match &self.kind {
            TaskKind::LinearRegression { inputs, .. } | TaskKind::LogisticRegression { inputs } => *inputs,
            TaskKind::Mlp1Hidden { inputs, .. } => *inputs,
            TaskKind::VoxelDice { channels, grid, .. } => channels * grid.iter().product::<usize>(),
        }
    }

    /// Length of a sample's target array.
    pub fn target_len(&self) -> usize {
        match &self.kind {
            TaskKind::LinearRegression { .. } | TaskKind::LogisticRegression { .. } => 1,
            TaskKind::Mlp1Hidden { outputs, .. } => *outputs,
            TaskKind::VoxelDice { grid, .. } => grid.iter().product(),
        }
    }

    /// Small Gaussian weights, zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamVec<T> {
        let mut rng = rng::derived_rng(seed, "init", &[]);
        let mut w = ParamVec::zeros(&self.layout);
        let scale = match &self.kind {
            TaskKind::Mlp1Hidden { inputs, .. } => 1.0 / (*inputs as f64).sqrt(),
            _ => 0.01,
        };
        for block in self.layout.blocks() {
            if block.name.ends_with("_b") || block.name == "bias" {
                continue;
            }
            for v in &mut w.values_mut()[block.range()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = T::lit(scale * z);
            }
        }
        w
    }

    fn check_sample<T: Scalar>(&self, sample: &Sample<T>) -> Result<()> {
        if sample.x.len() != self.feature_len() || sample.y.len() != self.target_len() {
            return Err(Error::InvalidArgument(format!(
                "sample {} has {} features / {} targets, model expects {} / {}",
                sample.id,
                sample.x.len(),
                sample.y.len(),
                self.feature_len(),
                self.target_len()
            )));
        }
        Ok(())
    }

    /// Voxel foreground probabilities `σ(w·x_v + b)` for a voxel_dice sample.
    pub fn voxel_probabilities<T: Scalar>(&self, w: &ParamVec<T>, sample: &Sample<T>) -> Result<Vec<T>> {
        let TaskKind::VoxelDice { channels, .. } = &self.kind else {
            return Err(Error::InvalidArgument(
                "voxel probabilities need a voxel_dice task".into(),
            ));
        };
        self.check_sample(sample)?;
        let weight = w.block("weight")?;
        let bias = w.block("bias")?[0];
        Ok(sample
            .x
            .chunks(*channels)
            .map(|feat| sigmoid(dot(weight, feat) + bias))
            .collect())
    }

    /// Loss of one sample plus its gradient accumulated into `grad` with `scale`.
    fn sample_loss_grad<T: Scalar>(&self, w: &ParamVec<T>, s: &Sample<T>, grad: Option<(&mut [T], T)>) -> Result<T> {
        self.check_sample(s)?;
        let v = w.values();
        let half = T::lit(0.5);
        let loss = match &self.kind {
            TaskKind::LinearRegression { inputs, bias } => {
                let b = if *bias { v[*inputs] } else { T::zero() };
                let r = dot(&v[..*inputs], &s.x) + b - s.y[0];
                if let Some((g, scale)) = grad {
                    let c = scale * r;
                    axpy(&mut g[..*inputs], c, &s.x);
                    if *bias {
                        g[*inputs] = g[*inputs] + c;
                    }
                }
                half * r * r
            }
            TaskKind::LogisticRegression { inputs } => {
                let z = dot(&v[..*inputs], &s.x) + v[*inputs];
                let y = s.y[0];
                if let Some((g, scale)) = grad {
                    let c = scale * (sigmoid(z) - y);
                    axpy(&mut g[..*inputs], c, &s.x);
                    g[*inputs] = g[*inputs] + c;
                }
                softplus(z) - y * z
            }
            TaskKind::Mlp1Hidden {
                inputs,
                hidden,
                outputs,
            } => {
                let (ni, nh, no) = (*inputs, *hidden, *outputs);
                let w1 = &v[..nh * ni];
                let b1 = &v[nh * ni..nh * ni + nh];
                let off2 = nh * ni + nh;
                let w2 = &v[off2..off2 + no * nh];
                let b2 = &v[off2 + no * nh..];
                let h: Vec<T> = (0..nh)
                    .map(|j| (dot(&w1[j * ni..(j + 1) * ni], &s.x) + b1[j]).tanh())
                    .collect();
                let r: Vec<T> = (0..no)
                    .map(|o| dot(&w2[o * nh..(o + 1) * nh], &h) + b2[o] - s.y[o])
                    .collect();
                if let Some((g, scale)) = grad {
                    let (g1, g2) = g.split_at_mut(off2);
                    let (gw1, gb1) = g1.split_at_mut(nh * ni);
                    let (gw2, gb2) = g2.split_at_mut(no * nh);
                    let mut dh = vec![T::zero(); nh];
                    for o in 0..no {
                        let c = scale * r[o];
                        gb2[o] = gb2[o] + c;
                        axpy(&mut gw2[o * nh..(o + 1) * nh], c, &h);
                        axpy(&mut dh, r[o], &w2[o * nh..(o + 1) * nh]);
                    }
                    for j in 0..nh {
                        let dz = scale * dh[j] * (T::one() - h[j] * h[j]);
                        gb1[j] = gb1[j] + dz;
                        axpy(&mut gw1[j * ni..(j + 1) * ni], dz, &s.x);
                    }
                }
                half * r.iter().fold(T::zero(), |a, &x| a + x * x)
            }
            TaskKind::VoxelDice { channels, epsilon, .. } => {
                let nc = *channels;
                let probs = self.voxel_probabilities(w, s)?;
                let (loss, dp) = soft_dice_loss(&probs, &s.y, T::lit(*epsilon))?;
                if let Some((g, scale)) = grad {
                    let (gw, gb) = g.split_at_mut(nc);
                    for ((feat, &p), &d) in s.x.chunks(nc).zip(&probs).zip(&dp) {
                        let dz = scale * d * p * (T::one() - p);
                        axpy(gw, dz, feat);
                        gb[0] = gb[0] + dz;
                    }
                }
                loss
            }
        };
        Ok(loss)
    }
}

impl<T: Scalar> Objective<T> for TaskModel {
    fn layout(&self) -> &BlockMap {
        &self.layout
    }

    fn loss_and_grad(&self, w: &ParamVec<T>, batch: &[&Sample<T>]) -> Result<(T, ParamVec<T>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        w.check_compatible(&ParamVec::zeros(&self.layout), 0)?;
        let mut grad = ParamVec::zeros(&self.layout);
        let scale = T::one() / T::from_count(batch.len());
        let mut total = T::zero();
        for (i, s) in batch.iter().enumerate() {
            let l = self.sample_loss_grad(w, s, Some((grad.values_mut(), scale)))?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss of sample {}", s.id),
                    index: i,
                });
            }
            total = total + l;
        }
        grad.ensure_finite("gradient")?;
        Ok((total * scale, grad))
    }

    fn sample_loss(&self, w: &ParamVec<T>, sample: &Sample<T>) -> Result<T> {
        let l = self.sample_loss_grad(w, sample, None)?;
        if !l.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss of sample {}", sample.id),
                index: 0,
            });
        }
        Ok(l)
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}
