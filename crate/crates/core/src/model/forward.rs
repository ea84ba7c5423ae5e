use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::model::kv::KvCache;
use crate::model::weights::{LayerWeights, ModelWeights};
use crate::qgemm::qgemm;
use crate::quant::{quantize, QuantConfig, QuantizedTensor};
use crate::tensor::{matmul_transposed, Matrix};

pub const RMS_NORM_EPS: f32 = 1e-6;

/// Precision of the seven linear projections in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    High,
    Nvfp4,
}

/// What an `Nvfp4` linear layer actually executes. `Identity` is a test hook
/// that routes it through the working-precision GEMM instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fp4Kernel {
    #[default]
    Nvfp4,
    Identity,
}

/// Post-softmax attention rows for one query position, `[layer][head][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub query_position: usize,
    pub rows: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub kv: KvCache,
    /// Logits at the last prompt position.
    pub logits: Vec<f32>,
    pub attention: Option<AttentionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Linear {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

#[derive(Debug)]
struct LayerShadows([QuantizedTensor; 7]);

/// Model weights plus lazily built NVFP4 weight shadows.
#[derive(Debug)]
pub struct Model {
    weights: ModelWeights,
    kernel: Fp4Kernel,
    shadows: OnceLock<Vec<LayerShadows>>,
}

impl Model {
    pub fn new(weights: ModelWeights) -> Self {
        Model::with_kernel(weights, Fp4Kernel::Nvfp4)
    }

    pub fn with_kernel(weights: ModelWeights, kernel: Fp4Kernel) -> Self {
        Model {
            weights,
            kernel,
            shadows: OnceLock::new(),
        }
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn config(&self) -> &crate::model::ModelConfig {
        &self.weights.config
    }

    pub fn digest(&self) -> u64 {
        self.weights.digest()
    }

    pub fn kernel(&self) -> Fp4Kernel {
        self.kernel
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.weights.config)
    }

    fn shadows(&self) -> Result<&[LayerShadows]> {
        if let Some(s) = self.shadows.get() {
            return Ok(s);
        }
        let built = build_shadows(&self.weights)?;
        Ok(self.shadows.get_or_init(|| built))
    }

    /// NVFP4 shadow of one linear weight (`index` in wq, wk, wv, wo, w_gate,
    /// w_up, w_down order).
    pub fn weight_shadow(&self, layer: usize, index: usize) -> Result<&QuantizedTensor> {
        Ok(&self.shadows()?[layer].0[index])
    }

    fn linear(&self, x: &Matrix, layer: usize, which: Linear, precision: Precision) -> Result<Matrix> {
        let lw = &self.weights.layers[layer];
        let (w, index) = match which {
            Linear::Q => (&lw.wq, 0),
            Linear::K => (&lw.wk, 1),
            Linear::V => (&lw.wv, 2),
            Linear::O => (&lw.wo, 3),
            Linear::Gate => (&lw.w_gate, 4),
            Linear::Up => (&lw.w_up, 5),
            Linear::Down => (&lw.w_down, 6),
        };
        match (precision, self.kernel) {
            (Precision::High, _) | (Precision::Nvfp4, Fp4Kernel::Identity) => matmul_transposed(x, w),
            (Precision::Nvfp4, Fp4Kernel::Nvfp4) => {
                let activations = quantize(x, &QuantConfig::default())?;
                qgemm(&activations, &self.shadows()?[layer].0[index])
            }
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let vocab = self.weights.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(t) => Err(Error::invalid(format!("token {t} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }

    fn embed(&self, tokens: &[u32]) -> Matrix {
        let d = self.weights.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.weights.embedding.row(t as usize));
        }
        x
    }

    /// One pre-norm residual block over `x` (`n × d_model`), whose rows sit
    /// at positions `start_pos..start_pos + n`. Appends the block's keys and
    /// values to `kv`.
    pub fn forward_block(
        &self,
        x: &mut Matrix,
        layer: usize,
        precision: Precision,
        kv: &mut KvCache,
        start_pos: usize,
    ) -> Result<()> {
        self.forward_block_recorded(x, layer, precision, kv, start_pos, None)
    }

    fn forward_block_recorded(
        &self,
        x: &mut Matrix,
        layer: usize,
        precision: Precision,
        kv: &mut KvCache,
        start_pos: usize,
        record: Option<&mut Vec<Vec<f32>>>,
    ) -> Result<()> {
        let cfg = &self.weights.config;
        if layer >= cfg.n_layers {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        }
        if kv.layer_len(layer) != start_pos {
            return Err(Error::Position {
                expected: kv.layer_len(layer),
                got: start_pos,
            });
        }
        if x.cols() != cfg.d_model {
            return Err(Error::shape(format!("hidden width {} != d_model {}", x.cols(), cfg.d_model)));
        }
        let n = x.rows();
        if start_pos + n > cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                position: start_pos + n,
                max_seq_len: cfg.max_seq_len,
            });
        }
        let lw: &LayerWeights = &self.weights.layers[layer];
        let (n_heads, head_dim) = (cfg.n_heads, cfg.head_dim);

        let h = rms_norm(x, &lw.attn_norm);
        let mut q = self.linear(&h, layer, Linear::Q, precision)?;
        let mut k = self.linear(&h, layer, Linear::K, precision)?;
        let v = self.linear(&h, layer, Linear::V, precision)?;
        for i in 0..n {
            let pos = start_pos + i;
            for head in 0..n_heads {
                let span = head * head_dim..(head + 1) * head_dim;
                apply_rope(&mut q.row_mut(i)[span.clone()], pos, cfg.rope_base);
                apply_rope(&mut k.row_mut(i)[span], pos, cfg.rope_base);
            }
            kv.append(layer, k.row(i), v.row(i))?;
        }

        let scale = 1.0 / (head_dim as f32).sqrt();
        let mut attn = Matrix::zeros(n, cfg.d_model);
        let mut record = record;
        for i in 0..n {
            let pos = start_pos + i;
            let is_recorded = i + 1 == n && record.is_some();
            for head in 0..n_heads {
                let span = head * head_dim..(head + 1) * head_dim;
                let qh = &q.row(i)[span.clone()];
                let mut weights: Vec<f32> = (0..=pos)
                    .map(|p| dot(qh, &kv.key_at(layer, p)[span.clone()]) * scale)
                    .collect();
                softmax_in_place(&mut weights);
                let out = &mut attn.row_mut(i)[span.clone()];
                for (p, &w) in weights.iter().enumerate() {
                    let vh = &kv.value_at(layer, p)[span.clone()];
                    for (o, &vv) in out.iter_mut().zip(vh) {
                        *o += w * vv;
                    }
                }
                if is_recorded {
                    if let Some(rows) = record.as_deref_mut() {
                        rows.push(weights);
                    }
                }
            }
        }
        let o = self.linear(&attn, layer, Linear::O, precision)?;
        add_in_place(x, &o);

        let h2 = rms_norm(x, &lw.mlp_norm);
        let gate = self.linear(&h2, layer, Linear::Gate, precision)?;
        let up = self.linear(&h2, layer, Linear::Up, precision)?;
        let mut act = gate;
        for (a, &u) in act.as_mut_slice().iter_mut().zip(up.as_slice()) {
            *a = silu(*a) * u;
        }
        let down = self.linear(&act, layer, Linear::Down, precision)?;
        add_in_place(x, &down);
        Ok(())
    }

    /// Runs `tokens` through every layer, continuing `kv`. Returns the final
    /// hidden states (before the output norm).
    fn run_chunk(
        &self,
        kv: &mut KvCache,
        tokens: &[u32],
        precision: Precision,
        mut record: Option<&mut AttentionRecord>,
    ) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let cfg = &self.weights.config;
        let start = kv.len();
        if start + tokens.len() > cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                position: start + tokens.len(),
                max_seq_len: cfg.max_seq_len,
            });
        }
        let mut x = self.embed(tokens);
        for layer in 0..cfg.n_layers {
            let mut rows = Vec::new();
            let slot = record.as_ref().map(|_| &mut rows);
            self.forward_block_recorded(&mut x, layer, precision, kv, start, slot)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.rows.push(rows);
            }
        }
        Ok(x)
    }

    fn logits_of(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let h = Matrix::from_vec(1, hidden.len(), hidden.to_vec())?;
        let normed = rms_norm(&h, &self.weights.final_norm);
        Ok(matmul_transposed(&normed, &self.weights.embedding)?.into_vec())
    }

    /// Appends `tokens` to an existing cache at `precision` and returns the
    /// logits of the last new position. Used for follow-up prompt chunks.
    pub fn extend(
        &self,
        kv: &mut KvCache,
        tokens: &[u32],
        precision: Precision,
        record_attention: bool,
    ) -> Result<(Vec<f32>, Option<AttentionRecord>)> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token chunk"));
        }
        let mut record = record_attention.then(|| AttentionRecord {
            query_position: kv.len() + tokens.len() - 1,
            rows: Vec::new(),
        });
        let hidden = self.run_chunk(kv, tokens, precision, record.as_mut())?;
        let logits = self.logits_of(hidden.row(hidden.rows() - 1))?;
        Ok((logits, record))
    }

    pub fn prefill(&self, tokens: &[u32], precision: Precision) -> Result<PrefillOutput> {
        self.prefill_with(tokens, precision, false)
    }

    /// Prefill that also records attention rows at the final prompt position.
    pub fn prefill_recorded(&self, tokens: &[u32], precision: Precision) -> Result<PrefillOutput> {
        self.prefill_with(tokens, precision, true)
    }

    fn prefill_with(&self, tokens: &[u32], precision: Precision, record: bool) -> Result<PrefillOutput> {
        if tokens.is_empty() {
            return Err(Error::invalid("prefill needs at least one token"));
        }
        let mut kv = self.new_cache();
        let (logits, attention) = self.extend(&mut kv, tokens, precision, record)?;
        Ok(PrefillOutput { kv, logits, attention })
    }

    pub fn decode_step(&self, kv: &mut KvCache, token: u32, precision: Precision) -> Result<Vec<f32>> {
        Ok(self.extend(kv, &[token], precision, false)?.0)
    }

    /// Logits at every position of a one-shot pass over `tokens`.
    pub fn forward_all(&self, tokens: &[u32], precision: Precision) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::invalid("forward needs at least one token"));
        }
        let mut kv = self.new_cache();
        let hidden = self.run_chunk(&mut kv, tokens, precision, None)?;
        let normed = rms_norm(&hidden, &self.weights.final_norm);
        matmul_transposed(&normed, &self.weights.embedding)
    }
}

fn build_shadows(weights: &ModelWeights) -> Result<Vec<LayerShadows>> {
    let cfg = QuantConfig::default();
    weights
        .layers
        .iter()
        .map(|layer| {
            let [a, b, c, d, e, f, g] = layer.linears().map(|w| quantize(w, &cfg));
            Ok(LayerShadows([a?, b?, c?, d?, e?, f?, g?]))
        })
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (&x, &y)| acc + x * y)
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, &b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a += b;
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Row-wise RMSNorm. A zero row stays zero.
pub fn rms_norm(x: &Matrix, gain: &[f32]) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f32;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean_sq = row.iter().map(|v| v * v).sum::<f32>() / d;
        let inv = 1.0 / (mean_sq + RMS_NORM_EPS).sqrt();
        for (v, &g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    out
}

/// Rotate-half RoPE on one head vector: pairs `(i, i + d/2)` rotate by
/// `pos · base^(-2i/d)`. Angles and trig in f64.
pub fn apply_rope(v: &mut [f32], pos: usize, base: f64) {
    let half = v.len() / 2;
    for i in 0..half {
        let inv_freq = base.powf(-2.0 * i as f64 / v.len() as f64);
        let (sin, cos) = (pos as f64 * inv_freq).sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * cos - b * sin;
        v[i + half] = a * sin + b * cos;
    }
}

/// Max-subtracted softmax in working precision.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}
