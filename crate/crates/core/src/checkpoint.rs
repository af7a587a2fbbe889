//! Binary parameter checkpoints.
//!
//! ```text
//! "KHPN" | version u16 | sha256(config) 32 bytes | count u32
//! count × ( name_len u32 | name | rank u32 | rank × dim u64 | f64 values )
//! ```
//!
//! All integers and floats are little-endian. The digest covers the
//! canonical TOML rendering of the model configuration, so a checkpoint only
//! loads into the configuration that produced it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KHPN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn config_digest(cfg: &ModelConfig) -> Result<[u8; 32]> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

pub fn encode_checkpoint(cfg: &ModelConfig, params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + params.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(cfg)?);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a checkpoint written for `cfg`; the digest and every parameter
/// name and shape must match a freshly initialised model.
pub fn decode_checkpoint(bytes: &[u8], cfg: &ModelConfig) -> Result<ParamStore> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a checkpoint".into(),
        });
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let digest = c.take(32, "config digest")?;
    if digest != config_digest(cfg)? {
        return Err(Error::Format {
            offset: 6,
            detail: "checkpoint was written for a different model configuration".into(),
        });
    }
    let count = c.u32("parameter count")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.pos as u64;
        let n = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                detail: "parameter name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = u64::from_le_bytes(c.take(8, "dimension")?.try_into().expect("8 bytes"));
            shape.push(usize::try_from(d).map_err(|_| Error::Format {
                offset: c.pos as u64 - 8,
                detail: "dimension too large".into(),
            })?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
            offset: at,
            detail: "parameter too large".into(),
        })?;
        let raw = c.take(numel.checked_mul(8).unwrap_or(usize::MAX), "values")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: at,
            detail: e.to_string(),
        })?;
        store.insert(name, t).map_err(|e| Error::Format {
            offset: at,
            detail: e.to_string(),
        })?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            detail: "trailing bytes".into(),
        });
    }
    let reference = cfg.init(0)?;
    if !store.same_layout(&reference) {
        return Err(Error::Format {
            offset: 0,
            detail: "parameter layout does not match the configuration".into(),
        });
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_checkpoint(cfg, params)?)
}

pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_digest_check() {
        let cfg = ModelConfig::default();
        let params = cfg.init(11).unwrap();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        assert_eq!(decode_checkpoint(&bytes, &cfg).unwrap(), params);

        let other = ModelConfig {
            head_hidden: 7,
            ..cfg.clone()
        };
        assert!(matches!(decode_checkpoint(&bytes, &other), Err(Error::Format { offset: 6, .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3], &cfg), Err(Error::Format { .. })));
    }
}
