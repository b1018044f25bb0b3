//! The full re-identification network and its training objective.

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::clip_memory::{BatchMemoryView, MemoryBank, SspParams};
use crate::data::{assemble, Dataset, SampleMode};
use crate::encoder::{encode_batch, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{total_loss, ClassifierParams, LossBundle, LossInputs, LABEL_SMOOTHING, TRIPLET_MARGIN};
use crate::nn::BlockShape;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::tmd::{tap_fallback, tmd_forward, TmdParams};

/// Sequence aggregation head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Tmd,
    /// Mean of the encoded class tokens over frames.
    Tap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub classes: usize,
    /// Prompt decoder on or off; off trains against the fixed memory.
    pub use_ssp: bool,
    pub ssp_blocks: usize,
    /// Heads of the prompt decoder, which runs at the joint width.
    pub ssp_heads: usize,
    pub fusion: Fusion,
    pub margin: f64,
    pub smoothing: f64,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, classes: usize) -> Self {
        ModelConfig {
            encoder,
            classes,
            use_ssp: true,
            ssp_blocks: 2,
            ssp_heads: 4,
            fusion: Fusion::Tmd,
            margin: TRIPLET_MARGIN,
            smoothing: LABEL_SMOOTHING,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes == 0 {
            return Err(Error::config("need at least one identity class"));
        }
        if self.use_ssp && self.ssp_blocks == 0 {
            return Err(Error::config("ssp_blocks must be at least 1 when ssp is on"));
        }
        let d = self.encoder.joint_width;
        if self.use_ssp && (self.ssp_heads == 0 || !d.is_multiple_of(self.ssp_heads)) {
            return Err(Error::config(format!(
                "joint width {d} not divisible by {} prompt decoder heads",
                self.ssp_heads
            )));
        }
        if !(self.margin >= 0.0) || !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config(
                "triplet_margin must be >= 0 and label_smoothing in [0, 1)",
            ));
        }
        Ok(())
    }

    /// Width of the concatenated test feature `[v ‖ v̂]`.
    pub fn feature_width(&self) -> usize {
        self.encoder.joint_width + self.encoder.token_width
    }
}

#[derive(Clone, Debug)]
pub struct TfClip<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub ssp: Option<SspParams>,
    pub tmd: Option<TmdParams>,
    pub classifier: ClassifierParams,
}

/// Forward outputs for a batch of sequences.
pub struct Forward<'t, T> {
    /// `[B, d]`.
    pub v: Var<'t, T>,
    /// `[B, D]`.
    pub v_hat: Var<'t, T>,
}

impl<T: Real> TfClip<T> {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let enc = config.encoder;
        let encoder = EncoderParams::init(&mut store, enc, rng)?;
        let ssp = if config.use_ssp {
            let shape = BlockShape {
                heads: config.ssp_heads,
                ..enc.block
            };
            Some(SspParams::init(
                &mut store,
                enc.joint_width,
                config.ssp_blocks,
                shape,
                rng,
            )?)
        } else {
            None
        };
        let tmd = match config.fusion {
            Fusion::Tmd => Some(TmdParams::init(&mut store, enc.token_width, enc.block, rng)?),
            Fusion::Tap => None,
        };
        let classifier = ClassifierParams::init(&mut store, enc.token_width, config.classes, rng);
        Ok(TfClip {
            config,
            store,
            encoder,
            ssp,
            tmd,
            classifier,
        })
    }

    /// Sequence features for frames `[B, T, H, W, 3]`.
    pub fn forward<'t>(&self, b: &Bound<'t, T>, frames: &Tensor<T>) -> Result<Forward<'t, T>> {
        let enc = encode_batch(b, &self.encoder, frames)?;
        let c = &self.config.encoder;
        let grids = enc
            .tokens
            .reshape(&[enc.batch, enc.frames, c.num_tokens(), c.token_width])?;
        let v_hat = match &self.tmd {
            Some(tmd) => tmd_forward(b, tmd, grids)?,
            None => tap_fallback(grids, c.token_width)?,
        };
        Ok(Forward { v: enc.v, v_hat })
    }

    /// Identity logits `[B, Y]` from `v̂`.
    pub fn logits<'t>(&self, b: &Bound<'t, T>, v_hat: Var<'t, T>) -> Result<Var<'t, T>> {
        v_hat.matmul(b.var(self.classifier.weight))
    }

    /// Objective for one PK batch; `identities` lists the batch identities
    /// in sampler order and `labels` gives one label per sequence.
    pub fn loss<'t>(
        &self,
        b: &Bound<'t, T>,
        bank: &MemoryBank<T>,
        frames: &Tensor<T>,
        identities: &[u32],
        labels: &[u32],
    ) -> Result<LossBundle<'t, T>> {
        let out = self.forward(b, frames)?;
        let view = match &self.ssp {
            Some(ssp) => BatchMemoryView::prompted(bank, b, ssp, identities, out.v)?,
            None => BatchMemoryView::fixed(bank, out.v.tape(), identities)?,
        };
        let logits = self.logits(b, out.v_hat)?;
        let classes = labels
            .iter()
            .map(|&y| {
                (y as usize)
                    .checked_sub(1)
                    .filter(|&c| c < self.config.classes)
                    .ok_or_else(|| Error::contract(format!("label {y} outside 1..={}", self.config.classes)))
            })
            .collect::<Result<Vec<_>>>()?;
        total_loss(LossInputs {
            v: out.v,
            v_hat: out.v_hat,
            memory: view.updated,
            memory_ids: &view.identities,
            logits,
            labels,
            classes: &classes,
            margin: self.config.margin,
            smoothing: self.config.smoothing,
        })
    }

    /// `[v ‖ v̂]` per sequence without recording gradients.
    pub fn embed(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let (v, v_hat) = self.embed_parts(frames)?;
        let tape = Tape::new();
        Var::concat(&[tape.constant(v), tape.constant(v_hat)], 1).map(|x| x.to_tensor())
    }

    /// `(v [B, d], v̂ [B, D])` without recording gradients.
    pub fn embed_parts(&self, frames: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let b = self.store.bind(&tape, true);
        let out = self.forward(&b, frames)?;
        Ok((out.v.to_tensor(), out.v_hat.to_tensor()))
    }

    /// `(v [n, d], v̂ [n, D])` for every tracklet of `ds` in manifest order,
    /// with deterministic frame sampling. Chunks run on the rayon pool and
    /// are joined in order, so the result does not depend on thread count.
    pub fn embed_dataset(&self, ds: &Dataset, seq_len: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        const CHUNK: usize = 16;
        let idx: Vec<usize> = (0..ds.manifest.len()).collect();
        let parts = idx
            .par_chunks(CHUNK)
            .map(|c| {
                // eval sampling never draws from the generator
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                let batch = assemble(ds, c, seq_len, SampleMode::Eval, &mut rng)?;
                self.embed_parts(&batch.frames.cast())
            })
            .collect::<Result<Vec<_>>>()?;
        let (vs, hs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        Ok((concat_rows(&vs)?, concat_rows(&hs)?))
    }
}

fn concat_rows<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let w = parts[0].shape()[1];
    let data: Vec<T> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(vec![data.len() / w, w], data)
}
