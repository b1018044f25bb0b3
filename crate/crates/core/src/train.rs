//! Training loop, memory bank construction and resumable state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::clip_memory::MemoryBank;
use crate::config::TrainConfig;
use crate::data::{assemble, augment, batches_per_epoch, derive_rng, pk_sample, Dataset, SampleMode};
use crate::error::{Error, Result};
use crate::model::TfClip;
use crate::numerics::{Adam, AdamState, Real, Tape, Tensor};

const STREAM_MODEL: u64 = 10;
const STREAM_TRAIN: u64 = 11;

/// Loss components of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_v2m: f64,
    pub l_tri: f64,
    pub l_ce: f64,
    pub total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,l_v2m,l_tri,l_ce,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.epoch, self.lr, self.l_v2m, self.l_tri, self.l_ce, self.total
        )
    }
}

/// FNV-1a over the little-endian parameter bytes, as a hex tag.
pub fn params_digest<T: Real>(model: &TfClip<T>, prefix: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in model.store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let mut bytes = name.as_bytes().to_vec();
        for x in t.data() {
            x.write_le(&mut bytes);
        }
        for b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Per-identity mean of `v` under `snapshot`, deterministic frame sampling.
pub fn build_memory_bank<T: Real>(snapshot: &TfClip<T>, ds: &Dataset, seq_len: usize) -> Result<MemoryBank<T>> {
    ds.manifest.validate()?;
    let (v, _) = snapshot.embed_dataset(ds, seq_len)?;
    let d = v.shape()[1];
    let rows: Vec<Tensor<T>> = (0..ds.manifest.len())
        .map(|i| Tensor::new(vec![d], v.data()[i * d..(i + 1) * d].to_vec()))
        .collect::<Result<_>>()?;
    let labels: Vec<u32> = ds.manifest.records.iter().map(|r| r.identity).collect();
    MemoryBank::from_features(&labels, &rows, params_digest(snapshot, "encoder."))
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: TfClip<T>,
    pub bank: MemoryBank<T>,
    pub adam: Adam,
    pub state: AdamState<T>,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

fn check_dataset(cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    let enc = &cfg.model.encoder;
    if (ds.frames.height, ds.frames.width) != (enc.height, enc.width) {
        return Err(Error::config(format!(
            "dataset frames are {}x{} but the model expects {}x{}",
            ds.frames.height, ds.frames.width, enc.height, enc.width
        )));
    }
    let ids = ds.manifest.identities().len();
    if ids != cfg.model.classes {
        return Err(Error::config(format!(
            "dataset has {ids} identities, model has {} classes",
            cfg.model.classes
        )));
    }
    Ok(())
}

impl<T: Real> Trainer<T> {
    /// Fresh model from the configured seed; the memory bank is built from
    /// the initial encoder, which then serves as the frozen snapshot.
    pub fn new(config: TrainConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        check_dataset(&config, train)?;
        let model = TfClip::init(config.model.clone(), &mut derive_rng(config.seed, STREAM_MODEL, 0, 0))?;
        let bank = build_memory_bank(&model, train, config.seq_len)?;
        let state = AdamState::for_params(model.store.tensors());
        Ok(Trainer {
            rng: derive_rng(config.seed, STREAM_TRAIN, 0, 0),
            config,
            model,
            bank,
            adam: Adam::default(),
            state,
            epoch: 0,
            step: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One pass of `⌈N_s / (P·K)⌉` PK batches.
    pub fn run_epoch(&mut self, train: &Dataset, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let cfg = &self.config;
        let lr = cfg.schedule.lr(self.epoch);
        let n = batches_per_epoch(&train.manifest, cfg.p_ids, cfg.k);
        let mut logs = Vec::with_capacity(n);
        for _ in 0..n {
            let word_pos = self.rng.get_word_pos();
            let pk = pk_sample(&train.manifest, cfg.p_ids, cfg.k, &mut self.rng)?;
            let mut batch = assemble(train, &pk.indices, cfg.seq_len, SampleMode::Train, &mut self.rng)?;
            augment(&mut batch.frames, cfg.flip_p, cfg.erase_p, &mut self.rng)?;
            let frames: Tensor<T> = batch.frames.cast();

            let tape = Tape::new();
            let b = self.model.store.bind(&tape, false);
            let bundle = self
                .model
                .loss(&b, &self.bank, &frames, &pk.identities, &batch.labels)?;
            let vals = bundle.values();
            if !vals.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {vals:?} at epoch {} step {}; batch drawn from seed {} \
                     at generator word position {word_pos}, tracklets {:?}",
                    self.epoch, self.step, cfg.seed, batch.tracklet_ids
                )));
            }
            if bundle.skipped_anchors > 0 {
                log::warn!("{} triplet anchors had no positive", bundle.skipped_anchors);
            }
            let mut grads = tape.backward(bundle.total)?;
            let g = b.collect_grads(&mut grads);
            self.adam
                .step(self.model.store.tensors_mut(), &g, &mut self.state, lr)?;

            let entry = StepLog {
                step: self.step,
                epoch: self.epoch,
                lr,
                l_v2m: vals.v2m,
                l_tri: vals.triplet,
                l_ce: vals.ce,
                total: vals.total,
            };
            log::debug!("{}", entry.csv_row());
            on_step(&entry);
            logs.push(entry);
            self.step += 1;
        }
        self.epoch += 1;
        Ok(logs)
    }

    /// Full-state snapshot for resuming.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_bytes("config", self.config.to_text().as_bytes())?;
        ck.push_u32("progress", &[self.epoch as u32, self.step as u32])?;
        ck.push_store("param.", &self.model.store)?;
        for (i, (name, _)) in self.model.store.iter().enumerate() {
            ck.push_tensor(format!("adam.m.{name}"), &self.state.m[i])?;
            ck.push_tensor(format!("adam.v.{name}"), &self.state.v[i])?;
        }
        ck.push_u32("adam.t", &[self.state.t as u32, (self.state.t >> 32) as u32])?;
        ck.push_tensor("clip_memory.M", self.bank.rows())?;
        ck.push_u32("clip_memory.ids", self.bank.identities())?;
        ck.push_bytes("clip_memory.snapshot", self.bank.snapshot_tag().as_bytes())?;
        let mut rng = Vec::with_capacity(14);
        for c in self.rng.get_seed().chunks_exact(4) {
            rng.push(u32::from_le_bytes(c.try_into().expect("4")));
        }
        let stream = self.rng.get_stream();
        rng.extend([stream as u32, (stream >> 32) as u32]);
        let wp = self.rng.get_word_pos();
        rng.extend((0..4).map(|i| (wp >> (32 * i)) as u32));
        ck.push_u32("rng", &rng)?;
        Ok(ck)
    }

    /// Restores every piece of state saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text =
            String::from_utf8(ck.bytes("config")?).map_err(|_| Error::Format("config entry is not UTF-8".into()))?;
        let config = TrainConfig::parse(&text)?;
        config.validate()?;
        let mut model = TfClip::init(config.model.clone(), &mut derive_rng(config.seed, STREAM_MODEL, 0, 0))?;
        ck.restore_store("param.", &mut model.store)?;
        let mut state = AdamState::for_params(model.store.tensors());
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            state.m[i] = ck.tensor(&format!("adam.m.{name}"))?;
            state.v[i] = ck.tensor(&format!("adam.v.{name}"))?;
        }
        let t = ck.u32s("adam.t")?;
        state.t = t[0] as u64 | (*t.get(1).unwrap_or(&0) as u64) << 32;
        let tag = String::from_utf8(ck.bytes("clip_memory.snapshot")?)
            .map_err(|_| Error::Format("snapshot tag is not UTF-8".into()))?;
        let bank = MemoryBank::from_rows(ck.tensor("clip_memory.M")?, ck.u32s("clip_memory.ids")?, tag)?;
        let r = ck.u32s("rng")?;
        if r.len() != 14 {
            return Err(Error::Format("rng entry must hold 14 words".into()));
        }
        let mut seed = [0u8; 32];
        for (i, w) in r[..8].iter().enumerate() {
            seed[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r[8] as u64 | (r[9] as u64) << 32);
        rng.set_word_pos(
            r[10..14]
                .iter()
                .enumerate()
                .fold(0u128, |acc, (i, &w)| acc | (w as u128) << (32 * i)),
        );
        let p = ck.u32s("progress")?;
        Ok(Trainer {
            config,
            model,
            bank,
            adam: Adam::default(),
            state,
            rng,
            epoch: p[0] as usize,
            step: *p.get(1).unwrap_or(&0) as usize,
        })
    }
}

/// Model and bank from a checkpoint, for evaluation.
pub fn load_model<T: Real>(ck: &Checkpoint) -> Result<(TrainConfig, TfClip<T>)> {
    let t = Trainer::<T>::from_checkpoint(ck)?;
    Ok((t.config, t.model))
}
