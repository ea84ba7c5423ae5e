use std::path::Path;

use crate::disagg::wire::{put_f32s, Reader};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::rng::NormalStream;
use crate::tensor::Matrix;

pub const INIT_STD: f64 = 0.02;

const MXQW_MAGIC: &[u8; 4] = b"MXQW";
const MXQW_VERSION: u32 = 1;

/// Linear weights are stored output-major (`out × in`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl LayerWeights {
    pub fn linears(&self) -> [&Matrix; 7] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_gate, &self.w_up, &self.w_down]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab × d_model`; doubles as the output head.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
}

/// Draws weights from N(0, 0.02²).
///
/// Consumption order: embedding, then for each layer wq, wk, wv, wo,
/// w_gate, w_up, w_down, each row-major, from one continuous normal
/// stream seeded with `cfg.seed`. Norm gains are ones and consume nothing.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut normals = NormalStream::new(cfg.seed);
    let mut draw = |rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| (INIT_STD * normals.next_normal()) as f32)
    };
    let (d, f) = (cfg.d_model, cfg.ffn_hidden);
    let embedding = draw(cfg.vocab_size, d);
    let layers = (0..cfg.n_layers)
        .map(|_| {
            let wq = draw(d, d);
            let wk = draw(d, d);
            let wv = draw(d, d);
            let wo = draw(d, d);
            let w_gate = draw(f, d);
            let w_up = draw(f, d);
            let w_down = draw(d, f);
            LayerWeights {
                attn_norm: vec![1.0; d],
                wq,
                wk,
                wv,
                wo,
                mlp_norm: vec![1.0; d],
                w_gate,
                w_up,
                w_down,
            }
        })
        .collect();
    Ok(ModelWeights {
        config: cfg.clone(),
        embedding,
        layers,
        final_norm: vec![1.0; d],
    })
}

impl ModelWeights {
    pub fn digest(&self) -> u64 {
        self.config.digest()
    }

    /// `MXQW`, version (u32), config block, config digest (u64), then f32
    /// tensors row-major: embedding; per layer attn_norm, wq, wk, wv, wo,
    /// mlp_norm, w_gate, w_up, w_down; final_norm. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MXQW_MAGIC);
        out.extend_from_slice(&MXQW_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.to_bytes());
        out.extend_from_slice(&self.digest().to_le_bytes());
        put_f32s(&mut out, self.embedding.as_slice());
        for layer in &self.layers {
            put_f32s(&mut out, &layer.attn_norm);
            for w in [&layer.wq, &layer.wk, &layer.wv, &layer.wo] {
                put_f32s(&mut out, w.as_slice());
            }
            put_f32s(&mut out, &layer.mlp_norm);
            for w in [&layer.w_gate, &layer.w_up, &layer.w_down] {
                put_f32s(&mut out, w.as_slice());
            }
        }
        put_f32s(&mut out, &self.final_norm);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MXQW_MAGIC {
            return Err(Error::format("bad MXQW magic"));
        }
        let version = r.u32()?;
        if version != MXQW_VERSION {
            return Err(Error::format(format!("unsupported MXQW version {version}")));
        }
        let config = ModelConfig::read_from(&mut r)?;
        let stored = r.u64()?;
        if stored != config.digest() {
            return Err(Error::DigestMismatch {
                expected: config.digest(),
                got: stored,
            });
        }
        config.validate()?;
        let (d, f) = (config.d_model, config.ffn_hidden);
        let mut matrix = |rows: usize, cols: usize| -> Result<Matrix> {
            Matrix::from_vec(rows, cols, r.f32_vec(rows * cols)?)
        };
        let embedding = matrix(config.vocab_size, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn_norm = matrix(1, d)?.into_vec();
            let wq = matrix(d, d)?;
            let wk = matrix(d, d)?;
            let wv = matrix(d, d)?;
            let wo = matrix(d, d)?;
            let mlp_norm = matrix(1, d)?.into_vec();
            let w_gate = matrix(f, d)?;
            let w_up = matrix(f, d)?;
            let w_down = matrix(d, f)?;
            layers.push(LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                w_gate,
                w_up,
                w_down,
            });
        }
        let final_norm = matrix(1, d)?.into_vec();
        r.finish()?;
        Ok(ModelWeights {
            config,
            embedding,
            layers,
            final_norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
