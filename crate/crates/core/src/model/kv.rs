use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

/// Per-layer keys and values, `[seq, n_heads, head_dim]` row-major, `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    n_heads: usize,
    head_dim: usize,
    max_seq_len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            max_seq_len: cfg.max_seq_len,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
        }
    }

    /// Rebuilds a cache from flat per-layer payloads.
    pub fn from_parts(
        cfg: &ModelConfig,
        keys: Vec<Vec<f32>>,
        values: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let mut kv = KvCache::new(cfg);
        if keys.len() != cfg.n_layers || values.len() != cfg.n_layers {
            return Err(Error::shape(format!(
                "expected {} layers, got {} keys / {} values",
                cfg.n_layers,
                keys.len(),
                values.len()
            )));
        }
        let len = keys.first().map_or(0, Vec::len);
        let row = kv.row_width();
        if !len.is_multiple_of(row) || len / row > cfg.max_seq_len {
            return Err(Error::shape(format!("invalid KV payload length {len}")));
        }
        if keys.iter().chain(&values).any(|t| t.len() != len) {
            return Err(Error::shape("layers disagree on KV length"));
        }
        kv.keys = keys;
        kv.values = values;
        Ok(kv)
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    fn row_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.layer_len(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.keys.get(layer).map_or(0, |k| k.len() / self.row_width())
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    /// Key row `[n_heads, head_dim]` of one cached position.
    pub fn key_at(&self, layer: usize, pos: usize) -> &[f32] {
        let w = self.row_width();
        &self.keys[layer][pos * w..(pos + 1) * w]
    }

    pub fn value_at(&self, layer: usize, pos: usize) -> &[f32] {
        let w = self.row_width();
        &self.values[layer][pos * w..(pos + 1) * w]
    }

    pub(crate) fn append(&mut self, layer: usize, key_row: &[f32], value_row: &[f32]) -> Result<()> {
        let pos = self.layer_len(layer);
        if pos >= self.max_seq_len {
            return Err(Error::ContextOverflow {
                position: pos + 1,
                max_seq_len: self.max_seq_len,
            });
        }
        debug_assert_eq!(key_row.len(), self.row_width());
        self.keys[layer].extend_from_slice(key_row);
        self.values[layer].extend_from_slice(value_row);
        Ok(())
    }

    /// True when both caches hold bit-identical payloads.
    pub fn bit_eq(&self, other: &KvCache) -> bool {
        let same = |a: &[Vec<f32>], b: &[Vec<f32>]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        self.n_heads == other.n_heads
            && self.head_dim == other.head_dim
            && same(&self.keys, &other.keys)
            && same(&self.values, &other.values)
    }
}
