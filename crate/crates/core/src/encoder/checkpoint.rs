//! Binary checkpoint: both encoders plus the config that produced them.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic    8 bytes  "ASYMCKPT"
//! version  u32
//! count    u32      number of tensors
//! count ×  { name_len u16, name utf-8, rank u8, extents u64 × rank, data f64 × len }
//! cfg_len  u64
//! config   utf-8 text
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::pair::EncoderPair;
use super::params::EncoderParams;
use crate::error::{LabError, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"ASYMCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub source: EncoderParams,
    pub target: EncoderParams,
    pub momentum: f64,
    pub config: String,
}

impl Checkpoint {
    pub fn from_pair(pair: &EncoderPair, config: impl Into<String>) -> Self {
        Checkpoint {
            source: pair.source.clone(),
            target: pair.target.clone(),
            momentum: pair.momentum,
            config: config.into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let momentum = Tensor::filled(&[1], self.momentum);
        let mut entries: Vec<(String, &Tensor)> = vec![("momentum".into(), &momentum)];
        for (prefix, p) in [("source", &self.source), ("target", &self.target)] {
            for (name, t) in p.named_tensors() {
                entries.push((format!("{prefix}.{name}"), t));
            }
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err("tensor name is not utf-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| r.err("extent overflow"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.err("tensor extends past end of file"))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(r.err(&format!("duplicate tensor '{name}'")));
            }
        }
        let cfg_len = usize::try_from(r.u64()?).map_err(|_| r.err("config length overflow"))?;
        let config = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| r.err("config block is not utf-8"))?
            .to_string();
        if r.remaining() != 0 {
            return Err(r.err("trailing bytes after config block"));
        }
        let momentum = tensors
            .remove("momentum")
            .and_then(|t| t.data().first().copied())
            .ok_or_else(|| LabError::Integrity("missing momentum".into()))?;
        let source = EncoderParams::from_named(|n| tensors.remove(&format!("source.{n}")))?;
        let target = EncoderParams::from_named(|n| tensors.remove(&format!("target.{n}")))?;
        if source.dims != target.dims {
            return Err(LabError::Integrity("source and target shapes differ".into()));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(LabError::Integrity(format!("unexpected tensor '{extra}'")));
        }
        Ok(Checkpoint {
            source,
            target,
            momentum,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> LabError {
        LabError::Parse {
            offset: self.pos as u64,
            msg: msg.to_string(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.err("unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::numerics::RngStream;

    fn ckpt() -> Checkpoint {
        let dims = EncoderDims {
            input: 7,
            backbone: 5,
            proj_hidden: 4,
            out: 3,
        };
        let s = EncoderParams::init(dims, &mut RngStream::new(5)).unwrap();
        let mut pair = EncoderPair::new(s, 0.99).unwrap();
        pair.target.proj_out.b.data_mut()[1] = -0.0;
        Checkpoint::from_pair(&pair, "[train]\nepochs = 1\n")
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = ckpt();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.target.proj_out.b.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let bytes = ckpt().to_bytes();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(LabError::Parse { offset: 8, .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = ckpt();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert_eq!(c.hash().len(), 64);
    }
}
