//! Procedural pedestrian tracklets.
//!
//! Each identity is a fixed colour layout (head, striped torso, legs) on an
//! `H×W` canvas. A camera adds a colour gain/offset, a horizontal shift and a
//! cluttered background. Each tracklet adds a walking sway, an optional
//! moving occluder and per-pixel Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::store::{Dataset, FrameStore, Manifest, TrackletRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub tracklets_per_identity: usize,
    pub frames_per_tracklet: usize,
    pub cameras: usize,
    /// Std of per-pixel frame noise.
    pub noise_sigma: f64,
    /// Scale of per-camera colour and position shift, 0 disables it.
    pub camera_shift: f64,
    /// Amplitude of background clutter.
    pub distractor_level: f64,
    /// Chance that a tracklet has a moving occluder.
    pub occluder_prob: f64,
    /// Horizontal walking sway in pixels.
    pub sway: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 16,
            tracklets_per_identity: 4,
            frames_per_tracklet: 16,
            cameras: 2,
            noise_sigma: 0.03,
            camera_shift: 0.3,
            distractor_level: 0.15,
            occluder_prob: 0.0,
            sway: 1.0,
            height: 32,
            width: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The harder variant used for the component comparison.
    pub fn hard(self) -> Self {
        SynthConfig {
            noise_sigma: 0.12,
            occluder_prob: 0.6,
            distractor_level: 0.3,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("identities", self.identities),
            ("tracklets_per_identity", self.tracklets_per_identity),
            ("frames_per_tracklet", self.frames_per_tracklet),
            ("cameras", self.cameras),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        let reals = [
            ("noise_sigma", self.noise_sigma),
            ("camera_shift", self.camera_shift),
            ("distractor_level", self.distractor_level),
            ("sway", self.sway),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return Err(Error::config("occluder_prob must be in [0, 1]"));
        }
        Ok(())
    }

    /// Also checks that frames tile into `patch`-sized squares.
    pub fn validate_for_patch(&self, patch: usize) -> Result<()> {
        self.validate()?;
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::config(format!(
                "frame size {}x{} must be a multiple of the patch size {patch}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Train split plus a held-out split of fresh tracklets of the same people.
#[derive(Clone, Debug)]
pub struct SynthSplits {
    pub train: Dataset,
    pub test: Dataset,
}

const STREAM_IDENTITY: u64 = 1;
const STREAM_CAMERA: u64 = 2;
const STREAM_TRACKLET: u64 = 3;

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream `(kind, a, b)` of the generator seeded with `seed`.
pub fn derive_rng(seed: u64, kind: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix(mix(mix(kind) ^ a) ^ b));
    rng
}

type Rgb = [f64; 3];

fn color(rng: &mut impl Rng, lo: f64, hi: f64) -> Rgb {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

struct Prototype {
    head: Rgb,
    torso: Rgb,
    stripe: Rgb,
    legs: Rgb,
    stripe_period: usize,
    vertical_stripes: bool,
    half_width: f64,
}

impl Prototype {
    fn sample(rng: &mut impl Rng) -> Self {
        Prototype {
            head: color(rng, 0.3, 0.9),
            torso: color(rng, 0.05, 0.95),
            stripe: color(rng, 0.05, 0.95),
            legs: color(rng, 0.05, 0.95),
            stripe_period: rng.random_range(2..6),
            vertical_stripes: rng.random_bool(0.5),
            half_width: rng.random_range(0.25..0.4),
        }
    }

    /// Body colour at canvas position `(y, x)` in a centred frame, `None`
    /// outside the silhouette.
    fn at(&self, y: usize, x: f64, h: usize, w: usize) -> Option<Rgb> {
        let (fy, cx) = (y as f64 / h as f64, x - w as f64 / 2.0 + 0.5);
        let half = self.half_width * w as f64;
        if fy < 0.05 {
            None
        } else if fy < 0.22 {
            (cx.abs() < half * 0.6).then_some(self.head)
        } else if fy < 0.6 {
            if cx.abs() >= half {
                return None;
            }
            let coord = if self.vertical_stripes {
                x.floor() as i64
            } else {
                y as i64
            };
            let band = coord.rem_euclid(self.stripe_period as i64) < self.stripe_period as i64 / 2;
            Some(if band { self.stripe } else { self.torso })
        } else if fy < 0.97 {
            let gap = half * 0.15;
            (cx.abs() < half * 0.85 && cx.abs() >= gap).then_some(self.legs)
        } else {
            None
        }
    }
}

struct Camera {
    gain: Rgb,
    offset: Rgb,
    dx: f64,
    background: Vec<Rgb>,
}

impl Camera {
    fn sample(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let s = cfg.camera_shift;
        let mut gain = [1.0; 3];
        let mut offset = [0.0; 3];
        for c in 0..3 {
            gain[c] += 0.5 * s * rng.random_range(-1.0..1.0);
            offset[c] = 0.2 * s * rng.random_range(-1.0..1.0);
        }
        let dx = s * rng.random_range(-1.0..1.0) * cfg.width as f64 / 8.0;
        let base = color(rng, 0.2, 0.8);
        // Block clutter at 4 pixel granularity.
        let (bh, bw) = (cfg.height.div_ceil(4), cfg.width.div_ceil(4));
        let blocks: Vec<Rgb> = (0..bh * bw)
            .map(|_| {
                let n = color(rng, -0.5, 0.5);
                [
                    base[0] + cfg.distractor_level * n[0],
                    base[1] + cfg.distractor_level * n[1],
                    base[2] + cfg.distractor_level * n[2],
                ]
            })
            .collect();
        let background = (0..cfg.height * cfg.width)
            .map(|i| blocks[(i / cfg.width / 4) * bw + (i % cfg.width) / 4])
            .collect();
        Camera {
            gain,
            offset,
            dx,
            background,
        }
    }
}

struct Occluder {
    color: Rgb,
    x0: f64,
    y0: f64,
    vy: f64,
    h: f64,
    w: f64,
}

fn render_tracklet(cfg: &SynthConfig, proto: &Prototype, cam: &Camera, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let occluder = (cfg.occluder_prob > 0.0 && rng.random_bool(cfg.occluder_prob)).then(|| {
        let oh = rng.random_range(h as f64 / 4.0..h as f64 / 2.0);
        Occluder {
            color: color(rng, 0.0, 1.0),
            x0: rng.random_range(-(w as f64) / 4.0..w as f64 / 2.0),
            y0: rng.random_range(0.0..h as f64),
            vy: rng.random_range(-1.0..1.0) * h as f64 / cfg.frames_per_tracklet as f64,
            h: oh,
            w: rng.random_range(w as f64 / 2.0..w as f64),
        }
    });
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("sigma >= 0");
    let mut out = Vec::with_capacity(cfg.frames_per_tracklet * h * w * 3);
    for t in 0..cfg.frames_per_tracklet {
        let sway = cfg.sway * (std::f64::consts::TAU * t as f64 / 8.0 + phase).sin();
        let shift = (cam.dx + sway).round();
        let occ_y = occluder
            .as_ref()
            .map(|o| (o.y0 + o.vy * t as f64).rem_euclid(h as f64 + o.h) - o.h);
        for y in 0..h {
            for x in 0..w {
                let mut px = proto.at(y, x as f64 - shift, h, w).unwrap_or(cam.background[y * w + x]);
                if let (Some(o), Some(oy)) = (&occluder, occ_y) {
                    let (fy, fx) = (y as f64, x as f64);
                    if fy >= oy && fy < oy + o.h && fx >= o.x0 && fx < o.x0 + o.w {
                        px = o.color;
                    }
                }
                for c in 0..3 {
                    let mut v = cam.gain[c] * px[c] + cam.offset[c];
                    if cfg.noise_sigma > 0.0 {
                        v += noise.sample(rng);
                    }
                    out.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    out
}

fn render_split(
    cfg: &SynthConfig,
    protos: &[Prototype],
    cams: &[Camera],
    split: u64,
    first_id: u32,
) -> Result<Dataset> {
    let k = cfg.tracklets_per_identity;
    let n = cfg.identities * k;
    let frames: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng(cfg.seed, STREAM_TRACKLET, split, i as u64);
            render_tracklet(cfg, &protos[i / k], &cams[(i % k) % cfg.cameras], &mut rng)
        })
        .collect();
    let f = cfg.frames_per_tracklet as u32;
    let records = (0..n)
        .map(|i| TrackletRecord {
            tracklet_id: first_id + i as u32,
            identity: (i / k) as u32 + 1,
            camera: ((i % k) % cfg.cameras) as u32 + 1,
            frame_offset: i as u32 * f,
            frame_count: f,
        })
        .collect();
    let store = FrameStore::new(cfg.height, cfg.width, frames.concat())?;
    Dataset::new(Manifest { records }, store)
}

/// Deterministic in `config`, including the seed, for any thread count.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthSplits> {
    config.validate()?;
    let protos: Vec<Prototype> = (0..config.identities)
        .map(|y| Prototype::sample(&mut derive_rng(config.seed, STREAM_IDENTITY, y as u64, 0)))
        .collect();
    let cams: Vec<Camera> = (0..config.cameras)
        .map(|c| Camera::sample(config, &mut derive_rng(config.seed, STREAM_CAMERA, c as u64, 0)))
        .collect();
    let n = (config.identities * config.tracklets_per_identity) as u32;
    Ok(SynthSplits {
        train: render_split(config, &protos, &cams, 0, 0)?,
        test: render_split(config, &protos, &cams, 1, n)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            identities: 4,
            tracklets_per_identity: 2,
            frames_per_tracklet: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_match_config() {
        let s = synth_generate(&SynthConfig::default()).unwrap();
        assert_eq!(s.train.manifest.len(), 64);
        assert_eq!(s.train.frames.len(), 1024);
        assert_eq!(s.test.manifest.len(), 64);
        assert_eq!(s.train.manifest.identities(), (1..=16).collect::<Vec<u32>>());
    }

    #[test]
    fn noiseless_identity_frames_are_identical() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            camera_shift: 0.0,
            cameras: 1,
            sway: 0.0,
            ..small()
        };
        let s = synth_generate(&cfg).unwrap();
        for ds in [&s.train, &s.test] {
            for (i, r) in ds.manifest.records.iter().enumerate() {
                let reference = s.train.frame(2 * (r.identity as usize - 1), 0);
                for k in 0..r.frame_count as usize {
                    assert_eq!(ds.frame(i, k), reference);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.train.frames.to_bytes(), b.train.frames.to_bytes());
        let c = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train.frames.to_bytes(), c.train.frames.to_bytes());
    }

    #[test]
    fn pixels_in_unit_range() {
        let s = synth_generate(&small().hard()).unwrap();
        assert!(s.train.frames.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn patch_validation() {
        let cfg = SynthConfig { height: 30, ..small() };
        let err = cfg.validate_for_patch(8).unwrap_err().to_string();
        assert!(err.contains("multiple of the patch size"), "{err}");
        assert!(small().validate_for_patch(8).is_ok());
    }

    #[test]
    fn intra_identity_closer_than_inter() {
        let s = synth_generate(&SynthConfig::default()).unwrap();
        let ds = &s.train;
        let mean_frame = |i: usize| -> Vec<f32> {
            let n = ds.record(i).frame_count as usize;
            let mut acc = vec![0.0f32; ds.frames.frame_len()];
            for k in 0..n {
                for (a, &p) in acc.iter_mut().zip(ds.frame(i, k)) {
                    *a += p / n as f32;
                }
            }
            acc
        };
        let means: Vec<Vec<f32>> = (0..ds.manifest.len()).map(mean_frame).collect();
        let (mut intra, mut inter, mut ni, mut ne) = (0.0f64, 0.0f64, 0, 0);
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if ds.record(i).identity == ds.record(j).identity {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    ne += 1;
                }
            }
        }
        assert!(intra / (ni as f64) < inter / (ne as f64));
    }
}
