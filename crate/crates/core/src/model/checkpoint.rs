//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `TSCK`, `u32` version, length-prefixed config
//! JSON, a `u8` subword flag followed by length-prefixed merges and vocabulary
//! text, then `u32` tensor count and per tensor a length-prefixed name,
//! `u32` rows, `u32` cols and the raw `f64` values in row-major order.

use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::{ModelConfig, SaTransformer};
use crate::error::{Error, Result};
use crate::subword::{SubwordModel, Vocab};

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SaTransformer,
    pub subword: Option<SubwordModel>,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend((b.len() as u64).to_le_bytes());
    out.extend(b);
}

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) at: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(usize::try_from(n).map_err(|_| Error::Checkpoint("length overflow".into()))?)
    }

    pub(crate) fn text(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(self.model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_bytes(&mut out, &cfg);
        match &self.subword {
            Some(sw) => {
                out.push(1);
                let mut merges = Vec::new();
                sw.write_merges(&mut merges)?;
                put_bytes(&mut out, &merges);
                let mut vocab = Vec::new();
                sw.vocab().write(&mut vocab)?;
                put_bytes(&mut out, &vocab);
            }
            None => out.push(0),
        }
        let params = self.model.params();
        out.extend((params.len() as u32).to_le_bytes());
        for (name, t) in params.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.extend((t.nrows() as u32).to_le_bytes());
            out.extend((t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config: ModelConfig =
            serde_json::from_slice(r.bytes()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let subword = match r.take(1)?[0] {
            0 => None,
            1 => {
                let merges = SubwordModel::read_merges(r.text()?.as_bytes())?;
                let vocab = Vocab::read(r.text()?.as_bytes())?;
                Some(SubwordModel::from_merges(merges, vocab))
            }
            f => return Err(Error::Checkpoint(format!("bad subword flag {f}"))),
        };
        let n = r.u32()?;
        let mut params = ParamStore::default();
        for _ in 0..n {
            let name = r.text()?.to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if params.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.insert(name, t);
        }
        if r.at != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.at)));
        }
        if let Some(sw) = &subword {
            if sw.vocab().len() != config.vocab_size {
                return Err(Error::VocabularyMismatch(format!(
                    "subword vocabulary has {} entries, model expects {}",
                    sw.vocab().len(),
                    config.vocab_size
                )));
            }
        }
        Ok(Checkpoint {
            model: SaTransformer::from_params(config, params)?,
            subword,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_bytes(&buf)
    }

    /// First 16 hex digits of the SHA-256 of the serialized checkpoint.
    pub fn model_id(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}
