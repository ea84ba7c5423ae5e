use std::hash::Hasher;

use fnv::FnvHasher;

use crate::disagg::wire::Reader;
use crate::error::{Error, Result};
use crate::quant::DEFAULT_GROUP_SIZE;

/// Size of the serialized config block in bytes.
pub const CONFIG_BLOCK_LEN: usize = 7 * 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with derived `head_dim`, `ffn_hidden = 4·d_model` (rounded up
    /// to a multiple of 16) and `rope_base = 10000`.
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_seq_len: usize,
        seed: u64,
    ) -> Self {
        let g = DEFAULT_GROUP_SIZE;
        ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            head_dim: d_model.checked_div(n_heads).unwrap_or(0),
            ffn_hidden: (4 * d_model).div_ceil(g) * g,
            max_seq_len,
            rope_base: 10000.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = DEFAULT_GROUP_SIZE;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return fail("vocab_size, n_layers, n_heads and max_seq_len must be positive".into());
        }
        for (name, value) in [
            ("d_model", self.d_model),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
        ] {
            if value == 0 || value % g != 0 {
                return fail(format!("{name} = {value} is not a positive multiple of {g}"));
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            return fail(format!(
                "n_heads ({}) x head_dim ({}) != d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return fail(format!("rope_base {} must be positive", self.rope_base));
        }
        if [self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.ffn_hidden, self.max_seq_len]
            .iter()
            .any(|&v| v > u32::MAX as usize)
        {
            return fail("dimension does not fit in u32".into());
        }
        Ok(())
    }

    /// Fixed-layout config block: seven u32 (vocab_size, d_model, n_layers,
    /// n_heads, head_dim, ffn_hidden, max_seq_len), rope_base as f64 and
    /// seed as u64, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CONFIG_BLOCK_LEN);
        for v in [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.ffn_hidden,
            self.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.rope_base.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        Ok(ModelConfig {
            vocab_size: r.u32()? as usize,
            d_model: r.u32()? as usize,
            n_layers: r.u32()? as usize,
            n_heads: r.u32()? as usize,
            head_dim: r.u32()? as usize,
            ffn_hidden: r.u32()? as usize,
            max_seq_len: r.u32()? as usize,
            rope_base: r.f64()?,
            seed: r.u64()?,
        })
    }

    /// FNV-1a 64 over the config block.
    pub fn digest(&self) -> u64 {
        let mut hasher = FnvHasher::default();
        hasher.write(&self.to_bytes());
        hasher.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_fields() {
        let cfg = ModelConfig::new(100, 64, 2, 4, 128, 1);
        assert_eq!(cfg.head_dim, 16);
        assert_eq!(cfg.ffn_hidden, 256);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_dims() {
        assert!(matches!(ModelConfig::new(10, 24, 1, 1, 16, 0).validate(), Err(Error::Config(_))));
        // head_dim 8
        assert!(ModelConfig::new(10, 32, 1, 4, 16, 0).validate().is_err());
        let mut cfg = ModelConfig::new(10, 32, 1, 2, 16, 0);
        cfg.head_dim = 32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digest_is_fnv1a_of_block() {
        let cfg = ModelConfig::new(100, 64, 2, 4, 128, 1);
        let bytes = cfg.to_bytes();
        assert_eq!(bytes.len(), CONFIG_BLOCK_LEN);
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in &bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        assert_eq!(cfg.digest(), h);
        let mut other = cfg.clone();
        other.seed = 2;
        assert_ne!(other.digest(), cfg.digest());
        let mut r = Reader::new(&bytes);
        assert_eq!(ModelConfig::read_from(&mut r).unwrap(), cfg);
    }
}
