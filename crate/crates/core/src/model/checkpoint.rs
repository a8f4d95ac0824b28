//! Binary checkpoint: magic, version, config block, little-endian `f32`
//! weights, then a SHA-256 digest of everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCTX";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub(crate) fn encode_body(model: &Model) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(64 + model.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.vocab, cfg.layers, cfg.heads, cfg.model_dim, cfg.mlp_dim, cfg.max_seq_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.rope_base.to_le_bytes());
    out.extend_from_slice(&cfg.norm_eps.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for w in model.params() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut body = encode_body(model);
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    body
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length matches"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing PCTX magic bytes".into()));
    }
    if bytes.len() < 4 + DIGEST_LEN {
        return Err(Error::Digest);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Digest);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let [vocab, layers, heads, model_dim, mlp_dim, max_seq_len] = dims;
    let cfg = ModelConfig { vocab, layers, heads, model_dim, mlp_dim, max_seq_len, rope_base: r.f32()?, norm_eps: r.f32()?, seed: r.u64()? };
    let count = r.u64()? as usize;
    if body.len() - r.pos != count * 4 {
        return Err(Error::Format(format!("expected {count} weights, found {} bytes", body.len() - r.pos)));
    }
    let params = body[r.pos..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Model::from_params(cfg, params).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode(&std::fs::read(path)?)
}
