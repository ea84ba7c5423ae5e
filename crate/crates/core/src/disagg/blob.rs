//! KV-cache transfer blob.
//!
//! ```text
//! "MXQK" | version u32 | config digest u64
//! | n_layers u32 | n_heads u32 | head_dim u32 | seq_len u32
//! | prompt tokens u32 × seq_len
//! | for each layer: K f32 × (seq·heads·dim), then V f32 × (seq·heads·dim)
//! | CRC32 (IEEE) over every preceding byte, u32
//! ```
//! All numbers little-endian; K and V rows are `[seq, head, dim]`.

use crate::disagg::wire::{put_f32s, Reader};
use crate::error::{Error, Result};
use crate::model::{KvCache, ModelConfig};

pub const KV_MAGIC: &[u8; 4] = b"MXQK";
pub const KV_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct KvBlob {
    pub digest: u64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub prompt: Vec<u32>,
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

pub fn serialize_kv(kv: &KvCache, digest: u64, prompt: &[u32]) -> Result<Vec<u8>> {
    if kv.is_empty() {
        return Err(Error::invalid("cannot transfer an empty KV cache"));
    }
    if kv.len() != prompt.len() {
        return Err(Error::invalid(format!(
            "KV length {} does not match prompt length {}",
            kv.len(),
            prompt.len()
        )));
    }
    let per_layer = kv.len() * kv.n_heads() * kv.head_dim();
    let mut out = Vec::with_capacity(blob_len(kv.n_layers(), per_layer, prompt.len()));
    out.extend_from_slice(KV_MAGIC);
    out.extend_from_slice(&KV_VERSION.to_le_bytes());
    out.extend_from_slice(&digest.to_le_bytes());
    for v in [kv.n_layers(), kv.n_heads(), kv.head_dim(), kv.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in prompt {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for layer in 0..kv.n_layers() {
        put_f32s(&mut out, kv.keys(layer));
        put_f32s(&mut out, kv.values(layer));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn blob_len(n_layers: usize, per_layer: usize, seq_len: usize) -> usize {
    HEADER_LEN + 4 * seq_len + 2 * 4 * n_layers * per_layer + 4
}

impl KvBlob {
    /// Parses a blob at the start of `bytes`, returning it and the number
    /// of bytes it occupies. Checks the header and the trailing CRC.
    pub fn parse_prefix(bytes: &[u8]) -> Result<(KvBlob, usize)> {
        let mut header = Reader::new(bytes);
        if header.take(4)? != KV_MAGIC {
            return Err(Error::format("bad MXQK magic"));
        }
        let version = header.u32()?;
        if version != KV_VERSION {
            return Err(Error::format(format!("unsupported MXQK version {version}")));
        }
        let digest = header.u64()?;
        let n_layers = header.u32()? as usize;
        let n_heads = header.u32()? as usize;
        let head_dim = header.u32()? as usize;
        let seq_len = header.u32()? as usize;
        let per_layer = seq_len
            .checked_mul(n_heads)
            .and_then(|v| v.checked_mul(head_dim))
            .ok_or_else(|| Error::format("KV dimensions overflow"))?;
        let total = per_layer
            .checked_mul(8)
            .and_then(|v| v.checked_mul(n_layers))
            .and_then(|v| v.checked_add(HEADER_LEN + 4 * seq_len + 4))
            .ok_or_else(|| Error::format("KV dimensions overflow"))?;
        if bytes.len() < total {
            return Err(Error::format(format!(
                "truncated KV blob: header declares {total} bytes, have {}",
                bytes.len()
            )));
        }
        let body = &bytes[..total - 4];
        let stored = u32::from_le_bytes(bytes[total - 4..total].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader::new(&body[HEADER_LEN..]);
        let prompt = (0..seq_len).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
        let mut keys = Vec::with_capacity(n_layers);
        let mut values = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            keys.push(r.f32_vec(per_layer)?);
            values.push(r.f32_vec(per_layer)?);
        }
        r.finish()?;
        Ok((
            KvBlob {
                digest,
                n_layers,
                n_heads,
                head_dim,
                prompt,
                keys,
                values,
            },
            total,
        ))
    }

    /// Parses a buffer holding exactly one blob.
    pub fn parse(bytes: &[u8]) -> Result<KvBlob> {
        let (blob, used) = KvBlob::parse_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes after KV blob", bytes.len() - used)));
        }
        Ok(blob)
    }

    pub fn seq_len(&self) -> usize {
        self.prompt.len()
    }

    /// Converts to a cache for a model with `cfg`, rejecting blobs produced
    /// by a different model.
    pub fn into_cache(self, cfg: &ModelConfig) -> Result<(Vec<u32>, KvCache)> {
        if self.digest != cfg.digest() {
            return Err(Error::DigestMismatch {
                expected: cfg.digest(),
                got: self.digest,
            });
        }
        if (self.n_layers, self.n_heads, self.head_dim) != (cfg.n_layers, cfg.n_heads, cfg.head_dim) {
            return Err(Error::shape("KV blob dimensions do not match the model"));
        }
        if self.prompt.is_empty() {
            return Err(Error::invalid("KV blob holds no positions"));
        }
        let kv = KvCache::from_parts(cfg, self.keys, self.values)?;
        Ok((self.prompt, kv))
    }
}

/// Parses and validates a blob against `cfg` in one step.
pub fn deserialize_kv(bytes: &[u8], cfg: &ModelConfig) -> Result<(Vec<u32>, KvCache)> {
    KvBlob::parse(bytes)?.into_cache(cfg)
}
