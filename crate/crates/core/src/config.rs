//! Run configuration: line-oriented `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Fusion, ModelConfig};
use crate::numerics::LrSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    PaperShape,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper-shape" => Ok(Profile::PaperShape),
            _ => Err(Error::config(format!(
                "unknown profile {s:?}, expected desk or paper-shape"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub epochs: usize,
    pub p_ids: usize,
    pub k: usize,
    pub seq_len: usize,
    pub schedule: LrSchedule,
    pub flip_p: f64,
    pub erase_p: f64,
}

impl TrainConfig {
    /// Small enough to train in minutes on a laptop CPU.
    pub fn desk() -> Self {
        TrainConfig {
            seed: 0,
            data: SynthConfig::default(),
            model: ModelConfig::new(EncoderConfig::desk(), 16),
            epochs: 30,
            p_ids: 4,
            k: 2,
            seq_len: 4,
            schedule: LrSchedule {
                base_lr: 5e-4,
                warmup_epochs: 3,
                warmup_start_lr: 5e-5,
                decay_epochs: vec![20, 27],
                decay_factor: 0.1,
            },
            flip_p: 0.5,
            erase_p: 0.5,
        }
    }

    /// ViT-B/16 geometry and the reference schedule, for shape checks.
    pub fn paper_shape() -> Self {
        let enc = EncoderConfig::paper_shape();
        TrainConfig {
            data: SynthConfig {
                height: enc.height,
                width: enc.width,
                ..SynthConfig::default()
            },
            model: ModelConfig {
                ssp_heads: 8,
                ..ModelConfig::new(enc, 16)
            },
            epochs: 60,
            k: 4,
            seq_len: 8,
            schedule: LrSchedule::clip_reid(),
            ..Self::desk()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::PaperShape => Self::paper_shape(),
        }
    }

    /// Batch size `P·K`.
    pub fn batch_size(&self) -> usize {
        self.p_ids * self.k
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate_for_patch(self.model.encoder.patch)?;
        self.model.validate()?;
        self.schedule.validate()?;
        let enc = &self.model.encoder;
        if (self.data.height, self.data.width) != (enc.height, enc.width) {
            return Err(Error::config(format!(
                "frames are {}x{} but the encoder expects {}x{}",
                self.data.height, self.data.width, enc.height, enc.width
            )));
        }
        if self.model.classes != self.data.identities {
            return Err(Error::config("classifier classes must equal the identity count"));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("p_ids", self.p_ids),
            ("k", self.k),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.p_ids > self.data.identities {
            return Err(Error::config(format!(
                "p_ids = {} exceeds the {} identities",
                self.p_ids, self.data.identities
            )));
        }
        if self.k < 2 {
            log::warn!("k = 1 leaves triplet anchors without positives");
        }
        for (name, p) in [("flip_p", self.flip_p), ("erase_p", self.erase_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(|x| p(key, x.trim())).collect()
        }
        let e = &mut self.model.encoder;
        match key {
            "seed" => self.seed = p(key, value)?,
            "identities" => {
                self.data.identities = p(key, value)?;
                self.model.classes = self.data.identities;
            }
            "tracklets_per_identity" => self.data.tracklets_per_identity = p(key, value)?,
            "frames_per_tracklet" => self.data.frames_per_tracklet = p(key, value)?,
            "cameras" => self.data.cameras = p(key, value)?,
            "noise_sigma" => self.data.noise_sigma = p(key, value)?,
            "camera_shift" => self.data.camera_shift = p(key, value)?,
            "distractor_level" => self.data.distractor_level = p(key, value)?,
            "occluder_prob" => self.data.occluder_prob = p(key, value)?,
            "sway" => self.data.sway = p(key, value)?,
            "height" => {
                e.height = p(key, value)?;
                self.data.height = e.height;
            }
            "width" => {
                e.width = p(key, value)?;
                self.data.width = e.width;
            }
            "patch" => e.patch = p(key, value)?,
            "token_width" => e.token_width = p(key, value)?,
            "joint_width" => e.joint_width = p(key, value)?,
            "depth" => e.depth = p(key, value)?,
            "heads" => e.block.heads = p(key, value)?,
            "ffn_expansion" => e.block.expansion = p(key, value)?,
            "ssp" => self.model.use_ssp = p(key, value)?,
            "ssp_blocks" => self.model.ssp_blocks = p(key, value)?,
            "ssp_heads" => self.model.ssp_heads = p(key, value)?,
            "fusion" => self.model.fusion = p(key, value)?,
            "triplet_margin" => self.model.margin = p(key, value)?,
            "label_smoothing" => self.model.smoothing = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "p_ids" => self.p_ids = p(key, value)?,
            "k" => self.k = p(key, value)?,
            "seq_len" => self.seq_len = p(key, value)?,
            "base_lr" => self.schedule.base_lr = p(key, value)?,
            "warmup_epochs" => self.schedule.warmup_epochs = p(key, value)?,
            "warmup_start_lr" => self.schedule.warmup_start_lr = p(key, value)?,
            "decay_epochs" => self.schedule.decay_epochs = list(key, value)?,
            "decay_factor" => self.schedule.decay_factor = p(key, value)?,
            "flip_p" => self.flip_p = p(key, value)?,
            "erase_p" => self.erase_p = p(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        self.data.seed = self.seed;
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::desk().apply_text(text)
    }

    pub fn load(path: &Path, base: Self) -> Result<Self> {
        base.apply_text(&std::fs::read_to_string(path)?)
    }

    /// Every key, in a fixed order.
    pub fn to_text(&self) -> String {
        let (d, m, e, s) = (&self.data, &self.model, &self.model.encoder, &self.schedule);
        let decay: Vec<String> = s.decay_epochs.iter().map(usize::to_string).collect();
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("identities", d.identities.to_string()),
            ("tracklets_per_identity", d.tracklets_per_identity.to_string()),
            ("frames_per_tracklet", d.frames_per_tracklet.to_string()),
            ("cameras", d.cameras.to_string()),
            ("noise_sigma", d.noise_sigma.to_string()),
            ("camera_shift", d.camera_shift.to_string()),
            ("distractor_level", d.distractor_level.to_string()),
            ("occluder_prob", d.occluder_prob.to_string()),
            ("sway", d.sway.to_string()),
            ("height", e.height.to_string()),
            ("width", e.width.to_string()),
            ("patch", e.patch.to_string()),
            ("token_width", e.token_width.to_string()),
            ("joint_width", e.joint_width.to_string()),
            ("depth", e.depth.to_string()),
            ("heads", e.block.heads.to_string()),
            ("ffn_expansion", e.block.expansion.to_string()),
            ("ssp", m.use_ssp.to_string()),
            ("ssp_blocks", m.ssp_blocks.to_string()),
            ("ssp_heads", m.ssp_heads.to_string()),
            ("fusion", m.fusion.to_string()),
            ("triplet_margin", m.margin.to_string()),
            ("label_smoothing", m.smoothing.to_string()),
            ("epochs", self.epochs.to_string()),
            ("p_ids", self.p_ids.to_string()),
            ("k", self.k.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("base_lr", s.base_lr.to_string()),
            ("warmup_epochs", s.warmup_epochs.to_string()),
            ("warmup_start_lr", s.warmup_start_lr.to_string()),
            ("decay_epochs", decay.join(",")),
            ("decay_factor", s.decay_factor.to_string()),
            ("flip_p", self.flip_p.to_string()),
            ("erase_p", self.erase_p.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tmd" => Ok(Fusion::Tmd),
            "tap" => Ok(Fusion::Tap),
            _ => Err(Error::config(format!("unknown fusion {s:?}, expected tmd or tap"))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Tmd => "tmd",
            Fusion::Tap => "tap",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        for cfg in [TrainConfig::desk(), TrainConfig::paper_shape()] {
            assert_eq!(TrainConfig::desk().apply_text(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = TrainConfig::parse("# desk run\nepochs = 3  # short\n\nfusion = tap\nseed=7\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.model.fusion, Fusion::Tap);
        assert_eq!(cfg.data.seed, 7);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(TrainConfig::parse("epoch = 3")
            .unwrap_err()
            .to_string()
            .contains("unknown config key"));
        assert!(TrainConfig::parse("epochs 3").is_err());
        assert!(TrainConfig::parse("epochs = three").is_err());
        assert!(TrainConfig::parse("fusion = conv1d").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::paper_shape().validate().is_ok());
        let bad = TrainConfig::parse("height = 30").unwrap();
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("patch size"), "{msg}");
        assert!(TrainConfig::parse("p_ids = 17").unwrap().validate().is_err());
    }

    #[test]
    fn reference_schedule_points() {
        let s = TrainConfig::paper_shape().schedule;
        assert_eq!(s.lr(0), 5e-7);
        assert!((s.lr(10) - 5e-6).abs() < 1e-18);
        assert!((s.lr(30) - 5e-7).abs() < 1e-18);
        assert!((s.lr(50) - 5e-8).abs() < 1e-19);
    }
}
