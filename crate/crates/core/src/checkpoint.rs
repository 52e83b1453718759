//! `MRMC` checkpoint files.
//!
//! ```text
//! "MRMC"  u32 version  [u8; 32] config digest
//! repeated until EOF:
//!   u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f32 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{self, put_f32s, put_u32, Reader};
use crate::error::Result;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRMC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(config_digest: [u8; 32]) -> Self {
        Self {
            config_digest,
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.config_digest);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data().iter().copied());
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(r.fail("not an MRMC checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported checkpoint version {version}")));
        }
        let config_digest = r.take(32, "config digest")?.try_into().unwrap();
        let mut tensors = BTreeMap::new();
        while !r.at_end() {
            let index = tensors.len();
            let what = format!("record {index}");
            let len = r.u32(&what)? as usize;
            let name = String::from_utf8(r.take(len, &what)?.to_vec())
                .map_err(|_| r.fail(format!("{what}: name is not UTF-8")))?;
            let rank = r.u32(&what)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&what)? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| r.fail(format!("{what}: shape overflow")))?;
            let data = r.f32s(numel, &format!("{what} (`{name}`)"))?;
            let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("{what}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(r.fail(format!("{what}: duplicate tensor `{name}`")));
            }
        }
        Ok(Self {
            config_digest,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &binio::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new([7; 32]);
        c.tensors.insert("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5));
        c.tensors.insert("b".into(), Tensor::scalar(-1.25));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(Path::new("x"), &c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(Path::new("x"), &bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
        let err = Checkpoint::from_bytes(Path::new("x"), b"MRMX").unwrap_err();
        assert!(err.to_string().contains("not an MRMC"), "{err}");
    }
}
