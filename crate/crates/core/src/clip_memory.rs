//! Identity-level feature memory built from a frozen encoder snapshot, and
//! the sequence-conditioned prompt decoder that updates it per batch.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{decoder_block, BlockParams, BlockShape};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// One row per training identity: the mean of that identity's sequence
/// features under the frozen encoder. Read-only once built.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    rows: Tensor<T>,
    identities: Vec<u32>,
    index: BTreeMap<u32, usize>,
    snapshot_tag: String,
}

impl<T: Real> MemoryBank<T> {
    /// Averages `features` (each `[d]`) per label. Rows are ordered by label.
    pub fn from_features(labels: &[u32], features: &[Tensor<T>], snapshot_tag: impl Into<String>) -> Result<Self> {
        if labels.len() != features.len() || labels.is_empty() {
            return Err(Error::contract(format!(
                "memory bank needs one feature per label, got {} labels and {} features",
                labels.len(),
                features.len()
            )));
        }
        let d = features[0].numel();
        let mut sums: BTreeMap<u32, (Vec<T>, usize)> = BTreeMap::new();
        for (&y, f) in labels.iter().zip(features) {
            if f.numel() != d {
                return Err(Error::shape("build_memory_bank", features[0].shape(), f.shape()));
            }
            let e = sums.entry(y).or_insert_with(|| (vec![T::zero(); d], 0));
            for (acc, &x) in e.0.iter_mut().zip(f.data()) {
                *acc += x;
            }
            e.1 += 1;
        }
        let mut data = Vec::with_capacity(sums.len() * d);
        let mut identities = Vec::with_capacity(sums.len());
        for (y, (sum, n)) in sums {
            let n = T::of(n as f64);
            data.extend(sum.into_iter().map(|s| s / n));
            identities.push(y);
        }
        Self::from_rows(Tensor::new(vec![identities.len(), d], data)?, identities, snapshot_tag)
    }

    pub fn from_rows(rows: Tensor<T>, identities: Vec<u32>, snapshot_tag: impl Into<String>) -> Result<Self> {
        if rows.rank() != 2 || rows.shape()[0] != identities.len() {
            return Err(Error::Format(format!(
                "memory rows {:?} do not match {} identities",
                rows.shape(),
                identities.len()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::contract("memory bank rows must be finite"));
        }
        let index: BTreeMap<u32, usize> = identities.iter().enumerate().map(|(i, &y)| (y, i)).collect();
        if index.len() != identities.len() {
            return Err(Error::Format("duplicate identity in memory bank".into()));
        }
        Ok(MemoryBank {
            rows,
            identities,
            index,
            snapshot_tag: snapshot_tag.into(),
        })
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    pub fn snapshot_tag(&self) -> &str {
        &self.snapshot_tag
    }

    pub fn width(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn row_of(&self, label: u32) -> Option<usize> {
        self.index.get(&label).copied()
    }

    /// Copies the rows for `labels`, in order, as a `[P, d]` tensor.
    pub fn select(&self, labels: &[u32]) -> Result<Tensor<T>> {
        let d = self.width();
        let mut data = Vec::with_capacity(labels.len() * d);
        for &y in labels {
            let r = self
                .row_of(y)
                .ok_or_else(|| Error::contract(format!("identity {y} has no memory row")))?;
            data.extend_from_slice(&self.rows.data()[r * d..(r + 1) * d]);
        }
        Tensor::new(vec![labels.len(), d], data)
    }

    /// Records the selected rows on `tape` as constants.
    pub fn view<'t>(&self, tape: &'t Tape<T>, labels: &[u32]) -> Result<Var<'t, T>> {
        Ok(tape.constant(self.select(labels)?))
    }
}

/// `N` cross-attention decoder blocks at the joint width.
#[derive(Clone, Debug)]
pub struct SspParams {
    pub blocks: Vec<BlockParams>,
}

impl SspParams {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        width: usize,
        depth: usize,
        shape: BlockShape,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("prompt decoder needs at least one block"));
        }
        let blocks = (0..depth)
            .map(|i| BlockParams::init(store, &format!("ssp.block{i}"), width, shape, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SspParams { blocks })
    }
}

/// Prompt for the batch identities.
///
/// Memory rows are the queries and the sequence features serve as keys and
/// values for every block. The prompt is the change the decoder stack makes
/// to its queries, so zero output projections give a zero prompt.
pub fn ssp_forward<'t, T: Real>(
    b: &Bound<'t, T>,
    p: &SspParams,
    memory_rows: Var<'t, T>,
    sequence_features: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (ms, vs) = (memory_rows.shape(), sequence_features.shape());
    if ms.len() != 2 || vs.len() != 2 || ms[1] != vs[1] {
        return Err(Error::shape("ssp_forward", &ms, &vs));
    }
    let mut q = memory_rows;
    for blk in &p.blocks {
        q = decoder_block(b, blk, q, sequence_features)?;
    }
    q.sub(memory_rows)
}

/// `M′ = 𝒫 + M`.
pub fn update_memory<'t, T: Real>(memory_rows: Var<'t, T>, prompt: Var<'t, T>) -> Result<Var<'t, T>> {
    if memory_rows.shape() != prompt.shape() {
        return Err(Error::shape("update_memory", &memory_rows.shape(), &prompt.shape()));
    }
    prompt.add(memory_rows)
}

/// Memory rows of one batch before and after the prompt update.
pub struct BatchMemoryView<'t, T> {
    pub identities: Vec<u32>,
    pub rows: Var<'t, T>,
    pub updated: Var<'t, T>,
}

impl<'t, T: Real> BatchMemoryView<'t, T> {
    /// Without a decoder the view is the fixed memory.
    pub fn fixed(bank: &MemoryBank<T>, tape: &'t Tape<T>, identities: &[u32]) -> Result<Self> {
        let rows = bank.view(tape, identities)?;
        Ok(BatchMemoryView {
            identities: identities.to_vec(),
            rows,
            updated: rows,
        })
    }

    pub fn prompted(
        bank: &MemoryBank<T>,
        b: &Bound<'t, T>,
        ssp: &SspParams,
        identities: &[u32],
        sequence_features: Var<'t, T>,
    ) -> Result<Self> {
        let tape = sequence_features.tape();
        let rows = bank.view(tape, identities)?;
        let prompt = ssp_forward(b, ssp, rows, sequence_features)?;
        let updated = update_memory(rows, prompt)?;
        Ok(BatchMemoryView {
            identities: identities.to_vec(),
            rows,
            updated,
        })
    }
}
