//! PK batch sampling, temporal frame sampling and train-time augmentation.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::store::{Dataset, Manifest};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Record indices of one batch: `identities[i]` owns
/// `indices[i*K..(i+1)*K]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub identities: Vec<u32>,
    pub indices: Vec<usize>,
}

/// `P` distinct identities, then `K` tracklets each. Identities with fewer
/// than `K` tracklets are drawn with replacement.
pub fn pk_sample(manifest: &Manifest, p: usize, k: usize, rng: &mut impl Rng) -> Result<PkBatch> {
    if p == 0 || k == 0 {
        return Err(Error::config("P and K must be at least 1"));
    }
    let groups = manifest.by_identity();
    if groups.len() < p {
        return Err(Error::contract(format!(
            "PK sampling needs {p} identities, manifest has {}",
            groups.len()
        )));
    }
    let all: Vec<u32> = groups.keys().copied().collect();
    let identities: Vec<u32> = all.choose_multiple(rng, p).copied().collect();
    let mut indices = Vec::with_capacity(p * k);
    for y in &identities {
        let pool = &groups[y];
        if pool.len() >= k {
            indices.extend(pool.choose_multiple(rng, k).copied());
        } else {
            indices.extend((0..k).map(|_| *pool.choose(rng).expect("non-empty group")));
        }
    }
    Ok(PkBatch { identities, indices })
}

/// Batches per epoch, `⌈N_s / (P·K)⌉`.
pub fn batches_per_epoch(manifest: &Manifest, p: usize, k: usize) -> usize {
    manifest.len().div_ceil(p * k).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// `t` frame positions within a tracklet of `len` frames.
///
/// The tracklet is cut into `t` equal chunks; training draws one frame per
/// chunk, evaluation takes each chunk's first frame. Short tracklets repeat
/// their last frame.
pub fn sample_frames(len: usize, t: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::contract("cannot sample frames from an empty tracklet"));
    }
    if t == 0 {
        return Err(Error::config("sequence length T must be at least 1"));
    }
    if len < t {
        return Ok((0..t).map(|i| i.min(len - 1)).collect());
    }
    Ok((0..t)
        .map(|i| {
            let (lo, hi) = (i * len / t, (i + 1) * len / t);
            match mode {
                SampleMode::Eval => lo,
                SampleMode::Train => rng.random_range(lo..hi),
            }
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T, H, W, 3]`.
    pub frames: Tensor<f32>,
    pub labels: Vec<u32>,
    pub cameras: Vec<u32>,
    pub tracklet_ids: Vec<u32>,
}

/// Gathers `T` frames for each record index into one tensor.
pub fn assemble(ds: &Dataset, indices: &[usize], t: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<Batch> {
    let (h, w) = (ds.frames.height, ds.frames.width);
    let mut data = Vec::with_capacity(indices.len() * t * h * w * 3);
    let (mut labels, mut cameras, mut tracklet_ids) = (vec![], vec![], vec![]);
    for &i in indices {
        let r = ds.record(i);
        for k in sample_frames(r.frame_count as usize, t, mode, rng)? {
            data.extend_from_slice(ds.frame(i, k));
        }
        labels.push(r.identity);
        cameras.push(r.camera);
        tracklet_ids.push(r.tracklet_id);
    }
    Ok(Batch {
        frames: Tensor::new(vec![indices.len(), t, h, w, 3], data)?,
        labels,
        cameras,
        tracklet_ids,
    })
}

pub const ERASE_AREA: (f64, f64) = (0.02, 0.2);
const ERASE_ASPECT: (f64, f64) = (0.3, 3.3);

/// Mirrors every frame of one `[T, H, W, 3]` buffer around the vertical axis.
pub fn flip_horizontal(frames: &mut [f32], h: usize, w: usize) {
    for row in frames.chunks_exact_mut(w * 3) {
        debug_assert!(h > 0);
        for x in 0..w / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
            }
        }
    }
}

/// Overwrites one random rectangle of a single `[H, W, 3]` frame with
/// uniform noise. Returns `false` if no admissible rectangle was found.
pub fn erase_one(frame: &mut [f32], h: usize, w: usize, rng: &mut impl Rng) -> bool {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(ERASE_AREA.0..ERASE_AREA.1) * area;
        let aspect = rng.random_range(ERASE_ASPECT.0.ln()..ERASE_ASPECT.1.ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        let got = (eh * ew) as f64;
        if eh == 0 || ew == 0 || eh > h || ew > w || got < ERASE_AREA.0 * area || got > ERASE_AREA.1 * area {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                for c in 0..3 {
                    frame[(y * w + x) * 3 + c] = rng.random::<f32>();
                }
            }
        }
        return true;
    }
    false
}

/// Tracklet-consistent flip, then independent per-frame erasing, applied to
/// every sequence of a `[B, T, H, W, 3]` batch.
pub fn augment(frames: &mut Tensor<f32>, flip_p: f64, erase_p: f64, rng: &mut impl Rng) -> Result<()> {
    if !(0.0..=1.0).contains(&flip_p) || !(0.0..=1.0).contains(&erase_p) {
        return Err(Error::config("augmentation probabilities must be in [0, 1]"));
    }
    let s = frames.shape().to_vec();
    if s.len() != 5 || s[4] != 3 {
        return Err(Error::shape("augment", &s, &[0, 0, 0, 0, 3]));
    }
    let (t, h, w) = (s[1], s[2], s[3]);
    let fl = h * w * 3;
    for seq in frames.data_mut().chunks_exact_mut(t * fl) {
        if flip_p > 0.0 && rng.random_bool(flip_p) {
            flip_horizontal(seq, h, w);
        }
        for frame in seq.chunks_exact_mut(fl) {
            if erase_p > 0.0 && rng.random_bool(erase_p) {
                erase_one(frame, h, w, rng);
            }
        }
    }
    Ok(())
}

/// Shuffled record order used to visit every tracklet once, for callers that
/// want sweep rather than PK batches.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
