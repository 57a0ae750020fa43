//! Flat parameter vectors partitioned into named, role-tagged blocks.
//!
//! A model's parameters `θ = [φ, h]` live in one contiguous `Vec<f64>`. The
//! [`BlockLayout`] names each slice and tags it as part of the
//! representation extractor or the head, so aggregation can act on either
//! part alone.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Representation,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub role: Role,
}

impl Block {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    blocks: Vec<Block>,
    total: usize,
}

impl BlockLayout {
    /// Build a layout from `(name, len, role)` triples laid out back to back.
    pub fn from_sizes<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize, Role)>) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (name, len, role) in parts {
            let name = name.into();
            if len == 0 {
                return Err(Error::InvalidLayout(format!("block {name} is empty")));
            }
            if blocks.iter().any(|b: &Block| b.name == name) {
                return Err(Error::InvalidLayout(format!("duplicate block name {name}")));
            }
            blocks.push(Block { name, offset, len, role });
            offset += len;
        }
        if blocks.is_empty() {
            return Err(Error::InvalidLayout("no blocks".into()));
        }
        Ok(Self { blocks, total: offset })
    }

    /// Validate explicit blocks: contiguous, non-overlapping, increasing offsets.
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let mut expect = 0;
        for b in &blocks {
            if b.offset != expect || b.len == 0 {
                return Err(Error::InvalidLayout(format!(
                    "block {} at offset {} (len {}) is not contiguous with previous end {expect}",
                    b.name, b.offset, b.len
                )));
            }
            expect += b.len;
        }
        Self::from_sizes(blocks.into_iter().map(|b| (b.name, b.len, b.role)))
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Blocks selected by a role filter (`None` selects everything).
    pub fn selected(&self, filter: Option<Role>) -> impl Iterator<Item = &Block> + '_ {
        self.blocks.iter().filter(move |b| filter.is_none_or(|r| b.role == r))
    }

    /// Total parameter count in blocks matching `filter`.
    pub fn count(&self, filter: Option<Role>) -> usize {
        self.selected(filter).map(|b| b.len).sum()
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.blocks.iter().any(|b| b.role == role)
    }

    /// Copy of this layout with the first `n` blocks tagged Representation
    /// and the rest Head.
    pub fn with_representation_prefix(&self, n: usize) -> Self {
        let mut out = self.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            b.role = if i < n { Role::Representation } else { Role::Head };
        }
        out
    }
}

/// Dense parameters bound to a shared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<BlockLayout>,
}

fn same_layout(a: &Arc<BlockLayout>, b: &Arc<BlockLayout>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl ParamVector {
    pub fn zeros(layout: Arc<BlockLayout>) -> Self {
        Self { values: vec![0.0; layout.total()], layout }
    }

    pub fn from_values(layout: Arc<BlockLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::DimensionMismatch { expected: layout.total(), got: values.len() });
        }
        check_finite(&values, "parameter vector")?;
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for owners; callers must keep entries finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Result<&[f64]> {
        let b = self.layout.block(name).ok_or_else(|| Error::UnknownBlock(name.to_string()))?;
        Ok(&self.values[b.range()])
    }

    pub fn ensure_finite(&self) -> Result<()> {
        check_finite(&self.values, "parameter vector")
    }

    fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if same_layout(&self.layout, &other.layout) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch("operands use different block layouts".into()))
        }
    }

    /// `self + scale * src` on the blocks selected by `filter`; other blocks untouched.
    pub fn axpy(&mut self, scale: f64, src: &ParamVector, filter: Option<Role>) -> Result<()> {
        self.check_same_layout(src)?;
        src.ensure_finite()?;
        let layout = Arc::clone(&self.layout);
        for b in layout.selected(filter) {
            for i in b.range() {
                self.values[i] += scale * src.values[i];
            }
        }
        self.ensure_finite()
    }

    /// Sum of squares over the selected blocks.
    pub fn squared_l2(&self, filter: Option<Role>) -> Result<f64> {
        self.ensure_finite()?;
        Ok(self.layout.selected(filter).flat_map(|b| self.values[b.range()].iter()).map(|x| x * x).sum())
    }

    /// Copy the selected blocks from `src` into `self`.
    pub fn copy_blocks_from(&mut self, src: &ParamVector, filter: Option<Role>) -> Result<()> {
        self.check_same_layout(src)?;
        let layout = Arc::clone(&self.layout);
        for b in layout.selected(filter) {
            self.values[b.range()].copy_from_slice(&src.values[b.range()]);
        }
        Ok(())
    }
}

fn validate_inputs(params: &[&ParamVector], weights: &[f64]) -> Result<()> {
    if params.is_empty() {
        return Err(Error::InvalidWeights("no parameter vectors to combine".into()));
    }
    if params.len() != weights.len() {
        return Err(Error::InvalidWeights(format!("{} weights for {} parameter vectors", weights.len(), params.len())));
    }
    for p in params {
        params[0].check_same_layout(p)?;
        p.ensure_finite()?;
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!("weight {w} is negative or non-finite")));
    }
    Ok(())
}

/// `Σ_k w_k θ_k` on the selected blocks with no constraint on the weight sum.
///
/// Summation runs left to right in input order. Blocks outside the filter are
/// copied from the first input.
pub fn weighted_sum(params: &[&ParamVector], weights: &[f64], filter: Option<Role>) -> Result<ParamVector> {
    validate_inputs(params, weights)?;
    let mut out = params[0].clone();
    let layout = Arc::clone(&out.layout);
    for b in layout.selected(filter) {
        for i in b.range() {
            let mut acc = 0.0;
            for (p, w) in params.iter().zip(weights) {
                acc += w * p.values[i];
            }
            out.values[i] = acc;
        }
    }
    out.ensure_finite()?;
    Ok(out)
}

/// Convex combination `Σ_k w_k θ_k`; weights must sum to one within 1e-12.
///
/// Evaluated as `θ_0 + Σ_k w_k (θ_k − θ_0)` left to right, so averaging
/// identical inputs reproduces them bit for bit.
pub fn weighted_average(params: &[&ParamVector], weights: &[f64], filter: Option<Role>) -> Result<ParamVector> {
    validate_inputs(params, weights)?;
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidWeights(format!("weights sum to {total}, expected 1")));
    }
    let mut out = params[0].clone();
    let layout = Arc::clone(&out.layout);
    for b in layout.selected(filter) {
        for i in b.range() {
            let base = params[0].values[i];
            let mut acc = 0.0;
            for (p, w) in params.iter().zip(weights) {
                acc += w * (p.values[i] - base);
            }
            out.values[i] = base + acc;
        }
    }
    out.ensure_finite()?;
    Ok(out)
}

/// `1/K` weights whose average of K identical copies reproduces the input exactly.
pub fn uniform_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}
