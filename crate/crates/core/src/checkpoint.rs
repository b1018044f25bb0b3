//! Named-tensor container.
//!
//! Layout, all integers little-endian: `"TFCK"`, version u32, entry count
//! u32, then per entry a u16 name length, the UTF-8 name, a dtype tag u8, a
//! rank u8, `rank` u32 extents and the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"TFCK";
pub const VERSION: u32 = 1;

pub const DTYPE_U32: u8 = 3;
pub const DTYPE_U8: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => f32::DTYPE_TAG,
            Payload::F64(_) => f64::DTYPE_TAG,
            Payload::U32(_) => DTYPE_U32,
            Payload::U8(_) => DTYPE_U8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

fn real_payload<T: Real>(data: &[T]) -> Payload {
    match T::DTYPE_TAG {
        1 => Payload::F32(data.iter().map(|x| x.f64() as f32).collect()),
        _ => Payload::F64(data.iter().map(|x| x.f64()).collect()),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != payload.len() || shape.len() > u8::MAX as usize {
            return Err(Error::contract(format!(
                "entry {name}: shape {shape:?} does not fit payload"
            )));
        }
        if name.len() > u16::MAX as usize || self.get(&name).is_some() {
            return Err(Error::contract(format!("entry name {name:?} is too long or repeated")));
        }
        self.entries.push(Entry { name, shape, payload });
        Ok(())
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.push(name, t.shape().to_vec(), real_payload(t.data()))
    }

    pub fn push_u32(&mut self, name: impl Into<String>, v: &[u32]) -> Result<()> {
        self.push(
            name,
            vec![v.len().max(1)],
            Payload::U32(if v.is_empty() { vec![0] } else { v.to_vec() }),
        )
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, v: &[u8]) -> Result<()> {
        self.push(name, vec![v.len()], Payload::U8(v.to_vec()))
    }

    /// Every parameter under its store name.
    pub fn push_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) -> Result<()> {
        for (name, t) in store.iter() {
            self.push_tensor(format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn need(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name:?}")))
    }

    /// Reads a real tensor; the stored dtype must be `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.need(name)?;
        let data: Vec<T> = match (&e.payload, T::DTYPE_TAG) {
            (Payload::F32(v), 1) => v.iter().map(|&x| T::of(x as f64)).collect(),
            (Payload::F64(v), 2) => v.iter().map(|&x| T::of(x)).collect(),
            (p, _) => {
                return Err(Error::Format(format!(
                    "entry {name:?} has dtype tag {}, expected {} ({})",
                    p.tag(),
                    T::DTYPE_TAG,
                    T::NAME
                )))
            }
        };
        Tensor::new(e.shape.clone(), data)
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        match &self.need(name)?.payload {
            Payload::U32(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("entry {name:?} is not u32"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        match &self.need(name)?.payload {
            Payload::U8(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("entry {name:?} is not bytes"))),
        }
    }

    /// Overwrites every parameter of `store` from `prefix`-named entries,
    /// checking shapes against the store.
    pub fn restore_store<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self.tensor::<T>(&format!("{prefix}{name}"))?;
            store
                .set(&name, t)
                .map_err(|e| Error::Config(format!("checkpoint does not match the configured model: {e}")))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.tag());
            out.push(e.shape.len() as u8);
            for &s in &e.shape {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|s| s as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let payload = match tag {
                1 => Payload::F32(
                    r.take(4 * count)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
                2 => Payload::F64(
                    r.take(8 * count)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                DTYPE_U32 => Payload::U32(
                    r.take(4 * count)?
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
                DTYPE_U8 => Payload::U8(r.take(count)?.to_vec()),
                t => return Err(Error::Format(format!("entry {name:?}: unknown dtype tag {t}"))),
            };
            ck.push(name, shape, payload)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last checkpoint entry".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save leaves the old file intact
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.push_tensor("w", &Tensor::<f32>::ones(vec![2, 3])).unwrap();
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"TFCK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 1);
        assert_eq!(b[14], b'w');
        assert_eq!((b[15], b[16]), (1, 2));
        assert_eq!(b.len(), 17 + 8 + 24);
    }

    #[test]
    fn dtype_is_checked() {
        let mut ck = Checkpoint::new();
        ck.push_tensor("w", &Tensor::<f64>::ones(vec![2])).unwrap();
        assert!(ck.tensor::<f32>("w").is_err());
        assert_eq!(ck.tensor::<f64>("w").unwrap(), Tensor::ones(vec![2]));
        assert!(ck.tensor::<f64>("missing").is_err());
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut ck = Checkpoint::new();
        ck.push_u32("n", &[1, 2, 3]).unwrap();
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"TFCX").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_byte_identical(
            a in prop::collection::vec(any::<f32>(), 1..40),
            b in prop::collection::vec(any::<f64>(), 1..40),
            c in prop::collection::vec(any::<u32>(), 1..10),
            s in "[a-z.]{1,12}",
        ) {
            let mut ck = Checkpoint::new();
            ck.push(format!("a{s}"), vec![a.len()], Payload::F32(a)).unwrap();
            ck.push(format!("b{s}"), vec![1, b.len()], Payload::F64(b)).unwrap();
            ck.push_u32(format!("c{s}"), &c).unwrap();
            ck.push_bytes("cfg", s.as_bytes()).unwrap();
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
