//! On-disk dataset formats.
//!
//! Manifest: UTF-8, one tracklet per line, fields separated by the ASCII unit
//! separator (0x1F): `tracklet_id, identity, camera, frame_offset, frame_count`.
//!
//! Frame store: `"TFDS"`, then `version, height, width, total_frames` as
//! little-endian u32, then every frame as `H×W×3` little-endian f32 in
//! offset order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FIELD_SEP: char = '\u{1f}';
pub const FRAME_MAGIC: &[u8; 4] = b"TFDS";
pub const FRAME_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrackletRecord {
    pub tracklet_id: u32,
    /// 1-based identity label.
    pub identity: u32,
    /// 1-based camera id.
    pub camera: u32,
    pub frame_offset: u32,
    pub frame_count: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<TrackletRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Record indices per identity, identities ascending.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            m.entry(r.identity).or_default().push(i);
        }
        m
    }

    pub fn total_frames(&self) -> usize {
        self.records.iter().map(|r| r.frame_count as usize).sum()
    }

    /// Checks frame counts and that labels are contiguous `1..=Y`.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::config("manifest has no tracklets"));
        }
        for r in &self.records {
            if r.frame_count == 0 {
                return Err(Error::config(format!("tracklet {} has no frames", r.tracklet_id)));
            }
        }
        let ids = self.identities();
        if ids.first() != Some(&1) || ids.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::config("identity labels must be contiguous from 1"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let f = [r.tracklet_id, r.identity, r.camera, r.frame_offset, r.frame_count];
            let line: Vec<String> = f.iter().map(u32::to_string).collect();
            s.push_str(&line.join(&FIELD_SEP.to_string()));
            s.push('\n');
        }
        s
    }

    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(FIELD_SEP).collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 5 fields, got {}",
                    n + 1,
                    fields.len()
                )));
            }
            let mut v = [0u32; 5];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("manifest line {}: bad integer {f:?}", n + 1)))?;
            }
            records.push(TrackletRecord {
                tracklet_id: v[0],
                identity: v[1],
                camera: v[2],
                frame_offset: v[3],
                frame_count: v[4],
            });
        }
        Ok(Manifest { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(BufReader::new(fs::File::open(path)?))
    }
}

/// All frames of a split as one flat `f32` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStore {
    pub height: usize,
    pub width: usize,
    pixels: Vec<f32>,
}

impl FrameStore {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        let fl = height * width * 3;
        if fl == 0 || !pixels.len().is_multiple_of(fl) {
            return Err(Error::Format(format!(
                "{} pixels do not split into {height}x{width}x3 frames",
                pixels.len()
            )));
        }
        Ok(FrameStore { height, width, pixels })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        let fl = self.frame_len();
        &self.pixels[index * fl..(index + 1) * fl]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.pixels.len() * 4);
        out.extend_from_slice(FRAME_MAGIC);
        for v in [FRAME_VERSION, self.height as u32, self.width as u32, self.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != FRAME_MAGIC {
            return Err(Error::Format("frame store: bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4"));
        let (version, h, w, n) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
        if version != FRAME_VERSION {
            return Err(Error::Format(format!("frame store: unsupported version {version}")));
        }
        let body = &bytes[20..];
        if body.len() != n * h * w * 3 * 4 {
            return Err(Error::Format(format!(
                "frame store: header says {n} frames of {h}x{w}, body has {} bytes",
                body.len()
            )));
        }
        let pixels = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect();
        Self::new(h, w, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// A manifest together with the frames it references.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: FrameStore,
}

impl Dataset {
    pub fn new(manifest: Manifest, frames: FrameStore) -> Result<Self> {
        manifest.validate()?;
        for r in &manifest.records {
            if (r.frame_offset + r.frame_count) as usize > frames.len() {
                return Err(Error::Format(format!(
                    "tracklet {} references frames past the end of the store",
                    r.tracklet_id
                )));
            }
        }
        Ok(Dataset { manifest, frames })
    }

    pub fn record(&self, index: usize) -> &TrackletRecord {
        &self.manifest.records[index]
    }

    /// Frame `k` of tracklet `index`.
    pub fn frame(&self, index: usize, k: usize) -> &[f32] {
        let r = self.record(index);
        self.frames.frame(r.frame_offset as usize + k)
    }

    /// Writes `<name>.manifest` and `<name>.frames` into `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.manifest.save(&dir.join(format!("{name}.manifest")))?;
        self.frames.save(&dir.join(format!("{name}.frames")))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let manifest = Manifest::load(&dir.join(format!("{name}.manifest")))?;
        let frames = FrameStore::load(&dir.join(format!("{name}.frames")))?;
        Self::new(manifest, frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: u32, identity: u32, offset: u32, count: u32) -> TrackletRecord {
        TrackletRecord {
            tracklet_id: id,
            identity,
            camera: 1,
            frame_offset: offset,
            frame_count: count,
        }
    }

    #[test]
    fn manifest_uses_unit_separator() {
        let m = Manifest {
            records: vec![rec(0, 1, 0, 3)],
        };
        assert_eq!(m.to_text(), "0\u{1f}1\u{1f}1\u{1f}0\u{1f}3\n");
    }

    #[test]
    fn validation_rejects_gaps_and_empty() {
        let m = Manifest {
            records: vec![rec(0, 1, 0, 1), rec(1, 3, 1, 1)],
        };
        assert!(m.validate().is_err());
        let m = Manifest {
            records: vec![rec(0, 1, 0, 0)],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn frame_store_header() {
        let fs = FrameStore::new(2, 1, vec![0.5; 12]).unwrap();
        let b = fs.to_bytes();
        assert_eq!(&b[..4], b"TFDS");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
        assert_eq!(b.len(), 20 + 48);
        assert!(FrameStore::from_bytes(&b[..30]).is_err());
    }

    proptest! {
        #[test]
        fn manifest_roundtrip(rows in prop::collection::vec((0u32..1000, 1u32..50, 1u32..9, 0u32..10_000, 1u32..100), 1..20)) {
            let m = Manifest {
                records: rows.iter().map(|&(t, y, c, o, n)| TrackletRecord {
                    tracklet_id: t, identity: y, camera: c, frame_offset: o, frame_count: n,
                }).collect(),
            };
            let back = Manifest::parse(m.to_text().as_bytes()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn frame_store_roundtrip(px in prop::collection::vec(-1.0f32..2.0, 1..5)) {
            let n = px.len();
            let pixels: Vec<f32> = px.iter().flat_map(|&p| std::iter::repeat_n(p, 6)).collect();
            let fs = FrameStore::new(1, 2, pixels).unwrap();
            prop_assert_eq!(fs.len(), n);
            prop_assert_eq!(FrameStore::from_bytes(&fs.to_bytes()).unwrap(), fs);
        }
    }
}
