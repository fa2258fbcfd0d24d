//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"ODTRCKPT"`, `u32` version, `u64` config length, config JSON bytes,
//! `u64` tensor count, then per tensor `u64` name length, name bytes,
//! `u64` rank, `u64` dims, `f64` values; finally the SHA-256 of everything
//! before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ODTRCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_json();
        put_u64(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_u64(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_u64(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.ndim());
            for &d in t.shape() {
                put_u64(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("content checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = r.u64()?;
        let cfg = std::str::from_utf8(r.take(n)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = ExperimentConfig::from_json(cfg)?;
        let count = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u64()?;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u64()?;
            let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("tensor too large"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| bad(&format!("tensor {name}: {e}")))?;
            if params.get(&name).is_some() {
                return Err(bad(&format!("duplicate tensor {name}")));
            }
            params.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn bad(msg: &str) -> Error {
    Error::Checkpoint(msg.to_string())
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| bad("length overflows"))
    }
}
