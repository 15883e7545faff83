//! Flat parameter vectors with a named block layout.
//!
//! Models are stored as a single contiguous array. Layers only exist as named
//! blocks over that array, which is all the granularity partial sharing needs.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Ordered, contiguous, non-overlapping blocks covering `[0, dim)`.
#[derive(Debug, Clone)]
pub struct BlockMap {
    blocks: Arc<[Block]>,
    dim: usize,
}

impl PartialEq for BlockMap {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.blocks, &other.blocks) || (self.dim == other.dim && self.blocks == other.blocks)
    }
}

impl Eq for BlockMap {}

impl BlockMap {
    /// Lays blocks out back to back in the given order.
    pub fn from_lengths<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut start = 0;
        for (name, len) in parts {
            blocks.push(Block {
                name: name.into(),
                start,
                len,
            });
            start += len;
        }
        Self::from_blocks(blocks)
    }

    /// Validates an explicit block table.
    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidLayout("no blocks".into()));
        }
        let mut names = BTreeSet::new();
        let mut cursor = 0;
        for b in &blocks {
            if b.name.is_empty() {
                return Err(Error::InvalidLayout("empty block name".into()));
            }
            if !names.insert(b.name.as_str()) {
                return Err(Error::InvalidLayout(format!("duplicate block `{}`", b.name)));
            }
            if b.start != cursor {
                return Err(Error::InvalidLayout(format!(
                    "block `{}` starts at {} but previous blocks end at {}",
                    b.name, b.start, cursor
                )));
            }
            if b.len == 0 {
                return Err(Error::InvalidLayout(format!("block `{}` is empty", b.name)));
            }
            cursor += b.len;
        }
        Ok(Self {
            blocks: blocks.into(),
            dim: cursor,
        })
    }

    /// A single block named `params`.
    pub fn single(dim: usize) -> Result<Self> {
        Self::from_lengths([("params", dim)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Number of entries inside the named blocks.
    pub fn count_in<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<usize> {
        let mut total = 0;
        for n in names {
            total += self.get(n).ok_or_else(|| Error::UnknownBlock(n.to_string()))?.len;
        }
        Ok(total)
    }
}

/// Model parameters `w`, updates `Δw` and control variates all share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec<T> {
    values: Vec<T>,
    layout: BlockMap,
}

impl<T: Scalar> ParamVec<T> {
    pub fn new(values: Vec<T>, layout: BlockMap) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                index: 0,
                expected: layout.dim(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter".into(),
                index: i,
            });
        }
        Ok(Self { values, layout })
    }

    /// Single-block vector, mostly useful for tests and toy objectives.
    pub fn from_values(values: Vec<T>) -> Result<Self> {
        let layout = BlockMap::single(values.len())?;
        Self::new(values, layout)
    }

    pub fn zeros(layout: &BlockMap) -> Self {
        Self {
            values: vec![T::zero(); layout.dim()],
            layout: layout.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.layout)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn layout(&self) -> &BlockMap {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn block(&self, name: &str) -> Result<&[T]> {
        let b = self
            .layout
            .get(name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))?;
        Ok(&self.values[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let b = self
            .layout
            .get(name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))?
            .range();
        Ok(&mut self.values[b])
    }

    pub fn check_compatible(&self, other: &Self, index: usize) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                index,
                expected: self.dim(),
                found: other.dim(),
            });
        }
        if other.layout != self.layout {
            return Err(Error::LayoutMismatch { index });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                what: what.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_compatible(other, 0)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_scaled(T::one(), other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other, 0)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| a - b).collect();
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_compatible(other, 0)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm_squared(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn norm(&self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_compatible(other, 0)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }
}

/// `Σ_k weights[k] · vectors[k]`, reduced in the given order.
pub fn combine<T: Scalar>(weights: &[T], vectors: &[&ParamVec<T>]) -> Result<ParamVec<T>> {
    if vectors.is_empty() {
        return Err(Error::Empty("combine needs at least one vector".into()));
    }
    if weights.len() != vectors.len() {
        return Err(Error::WeightCount {
            expected: vectors.len(),
            found: weights.len(),
        });
    }
    let reference = vectors[0];
    for (i, v) in vectors.iter().enumerate().skip(1) {
        reference.check_compatible(v, i)?;
    }
    let mut out = reference.zeros_like();
    for (&w, v) in weights.iter().zip(vectors) {
        for (o, &x) in out.values.iter_mut().zip(&v.values) {
            *o = *o + w * x;
        }
    }
    out.ensure_finite("combined parameter")?;
    Ok(out)
}

/// `⟨u,v⟩ / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(u: &ParamVec<T>, v: &ParamVec<T>) -> Result<T> {
    let dot = u.dot(v)?;
    let nu = u.norm();
    let nv = v.norm();
    if nu == T::zero() {
        return Err(Error::ZeroNorm("first argument".into()));
    }
    if nv == T::zero() {
        return Err(Error::ZeroNorm("second argument".into()));
    }
    Ok((dot / (nu * nv)).max(-T::one()).min(T::one()))
}

/// Entries of `shared_blocks` taken from `source`, everything else from `target`.
pub fn masked_overwrite<T: Scalar, S: AsRef<str>>(
    target: &ParamVec<T>,
    source: &ParamVec<T>,
    shared_blocks: &[S],
) -> Result<ParamVec<T>> {
    target.check_compatible(source, 1)?;
    let mut out = target.clone();
    for name in shared_blocks {
        let name = name.as_ref();
        let range = target
            .layout
            .get(name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))?
            .range();
        out.values[range.clone()].copy_from_slice(&source.values[range]);
    }
    Ok(out)
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T> {
    pub client_id: usize,
    pub delta: ParamVec<T>,
    /// Number of local gradient steps `s_k`.
    pub steps: usize,
    /// SCAFFOLD control-variate update `Δc_k`.
    pub delta_control: Option<ParamVec<T>>,
}

impl<T: Scalar> ClientUpdate<T> {
    pub fn new(client_id: usize, delta: ParamVec<T>, steps: usize) -> Self {
        Self {
            client_id,
            delta,
            steps,
            delta_control: None,
        }
    }

    pub fn with_control(mut self, delta_control: ParamVec<T>) -> Self {
        self.delta_control = Some(delta_control);
        self
    }
}

/// Updates of one round with their aggregation weights `p_k`.
///
/// Entries are kept sorted by ascending client id so every reduction over
/// clients happens in the same order regardless of how results arrived.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSet<T> {
    updates: Vec<ClientUpdate<T>>,
    weights: Vec<T>,
}

impl<T: Scalar> UpdateSet<T> {
    pub fn new(updates: Vec<ClientUpdate<T>>, weights: Vec<T>) -> Result<Self> {
        if updates.is_empty() {
            return Err(Error::Empty("update set has no clients".into()));
        }
        if weights.len() != updates.len() {
            return Err(Error::WeightCount {
                expected: updates.len(),
                found: weights.len(),
            });
        }
        let mut paired: Vec<_> = updates.into_iter().zip(weights).collect();
        paired.sort_by_key(|(u, _)| u.client_id);
        for pair in paired.windows(2) {
            if pair[0].0.client_id == pair[1].0.client_id {
                return Err(Error::InvalidArgument(format!(
                    "client {} appears twice in the update set",
                    pair[0].0.client_id
                )));
            }
        }
        let reference = &paired[0].0.delta;
        for (i, (u, w)) in paired.iter().enumerate() {
            reference.check_compatible(&u.delta, i)?;
            if let Some(dc) = &u.delta_control {
                reference.check_compatible(dc, i)?;
            }
            if !w.is_finite() || *w < T::zero() {
                return Err(Error::InvalidWeights(format!(
                    "weight of client {} is {}",
                    u.client_id, w
                )));
            }
        }
        let total: T = paired.iter().map(|(_, w)| *w).sum();
        let tol = T::lit(1e-9).max(T::epsilon() * T::lit(64.0));
        if (total - T::one()).abs() > tol {
            return Err(Error::InvalidWeights(format!("weights sum to {total}, not 1")));
        }
        let (updates, weights) = paired.into_iter().unzip();
        Ok(Self { updates, weights })
    }

    /// `p_k = n_k / N` with `n_k` given per update (same order as `updates`).
    pub fn weighted_by_size(updates: Vec<ClientUpdate<T>>, sizes: &[usize]) -> Result<Self> {
        if sizes.len() != updates.len() {
            return Err(Error::WeightCount {
                expected: updates.len(),
                found: sizes.len(),
            });
        }
        let weights = size_weights(sizes)?;
        Self::new(updates, weights)
    }

    /// `p_k = 1 / K`.
    pub fn uniform(updates: Vec<ClientUpdate<T>>) -> Result<Self> {
        let k = updates.len();
        if k == 0 {
            return Err(Error::Empty("update set has no clients".into()));
        }
        let w = T::one() / T::from_count(k);
        Self::new(updates, vec![w; k])
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    pub fn updates(&self) -> &[ClientUpdate<T>] {
        &self.updates
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn client_ids(&self) -> Vec<usize> {
        self.updates.iter().map(|u| u.client_id).collect()
    }

    pub fn deltas(&self) -> Vec<&ParamVec<T>> {
        self.updates.iter().map(|u| &u.delta).collect()
    }

    pub fn layout(&self) -> &BlockMap {
        self.updates[0].delta.layout()
    }
}

/// Sample-proportional weights `n_k / N`.
pub fn size_weights<T: Scalar>(sizes: &[usize]) -> Result<Vec<T>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidWeights("total sample count is zero".into()));
    }
    let total = T::from_count(total);
    Ok(sizes.iter().map(|&n| T::from_count(n) / total).collect())
}
