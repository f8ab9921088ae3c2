//! Versioned binary checkpoints. Layout is described in `docs/checkpoint.md`.

use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::policy::{PolicyDims, PolicyParams};
use crate::trainer::{AdamState, TrainState};

pub const MAGIC: &[u8; 4] = b"CCAP";
pub const VERSION: u32 = 1;

/// Training state plus the resolved configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: KeyValues,
    pub state: TrainState,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let s = &self.state;
        let d = s.params.dims();
        let text = self.config.to_string();
        let mut out = Vec::with_capacity(64 + text.len() + 32 * d.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for v in [d.vocab, d.embed, d.history, d.features, d.hidden] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&s.step.to_le_bytes());
        out.extend_from_slice(&s.adam.t.to_le_bytes());
        for block in [
            s.params.as_slice(),
            s.reference.as_slice(),
            &s.adam.m,
            &s.adam.v,
        ] {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt(
                "not a cyclecap checkpoint (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: 8,
        };
        let text_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Corrupt("config block is not UTF-8".into()))?;
        let config = KeyValues::parse(text)?;
        let mut dim = || -> Result<usize> { Ok(r.u64()? as usize) };
        let dims = PolicyDims {
            vocab: dim()?,
            embed: dim()?,
            history: dim()?,
            features: dim()?,
            hidden: dim()?,
        };
        let step = r.u64()?;
        let t = r.u64()?;
        let n = dims.param_count();
        let params = PolicyParams::from_vec(dims, r.reals(n)?)?;
        let reference = PolicyParams::from_vec(dims, r.reals(n)?)?;
        let m = r.reals(n)?;
        let v = r.reals(n)?;
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!(
                "{} unexpected trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            state: TrainState {
                params,
                reference,
                adam: AdamState { m, v, t },
                step,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Corrupt("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
