//! Synthetic tracklets, dataset files and batch construction.

mod sampler;
mod store;
mod synth;

pub use sampler::{
    assemble, augment, batches_per_epoch, erase_one, flip_horizontal, pk_sample, sample_frames, shuffled_indices,
    Batch, PkBatch, SampleMode, ERASE_AREA,
};
pub use store::{Dataset, FrameStore, Manifest, TrackletRecord, FIELD_SEP, FRAME_MAGIC, FRAME_VERSION};
pub use synth::{derive_rng, synth_generate, SynthConfig, SynthSplits};
