//! NVFP4 two-level block quantization.
//!
//! Each row is cut into blocks of `group_size` consecutive elements along
//! the column (GEMM reduction) axis. A block carries an E4M3 scale and the
//! whole tensor carries one working-precision scale `alpha`:
//!
//! ```text
//! sigma_b = pi_e4m3(max_{i in b} |x_i| / (alpha * 6))
//! q_i     = pi_fp4(x_i / (alpha * sigma_b))
//! x̂_i     = (alpha * sigma_b) * q_i
//! ```

use crate::error::{Error, Result};
use crate::formats::{pi_e4m3, pi_fp4, Fp4Code, Fp8E4M3Code, Q_MAX, S_MAX};
use crate::tensor::Matrix;

pub const DEFAULT_GROUP_SIZE: usize = 16;

/// Explicit mantissa bits kept in a calibrated tensor scale. With 18 bits
/// (19 significant) `alpha * 448 * 6` is exact in `f32`, so dequantized
/// data recalibrates to the same `alpha`.
const TENSOR_SCALE_MANTISSA_BITS: u32 = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorScalePolicy {
    /// `alpha = amax / (q_max * s_max)`.
    AmaxCalibrated,
    /// `alpha = 1`.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub group_size: usize,
    pub tensor_scale_policy: TensorScalePolicy,
    /// Test hook: keep unrounded block scales instead of projecting them onto
    /// E4M3.
    pub exact_scales: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            group_size: DEFAULT_GROUP_SIZE,
            tensor_scale_policy: TensorScalePolicy::AmaxCalibrated,
            exact_scales: false,
        }
    }
}

impl QuantConfig {
    pub fn unit() -> Self {
        QuantConfig {
            tensor_scale_policy: TensorScalePolicy::Unit,
            ..Self::default()
        }
    }

    pub fn with_exact_scales(mut self) -> Self {
        self.exact_scales = true;
        self
    }
}

/// Dequantized values, `alpha * sigma * q` elementwise.
pub type DequantizedView = Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    group_size: usize,
    codes: Vec<Fp4Code>,
    /// Decoded block scales, `rows × (cols / group_size)`.
    scales: Vec<f32>,
    /// E4M3 encodings of `scales`; absent when built with exact scales.
    scale_codes: Option<Vec<Fp8E4M3Code>>,
    tensor_scale: f32,
}

impl QuantizedTensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / self.group_size
    }

    pub fn codes(&self) -> &[Fp4Code] {
        &self.codes
    }

    pub fn row_codes(&self, r: usize) -> &[Fp4Code] {
        &self.codes[r * self.cols..(r + 1) * self.cols]
    }

    pub fn block_scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn row_scales(&self, r: usize) -> &[f32] {
        let n = self.blocks_per_row();
        &self.scales[r * n..(r + 1) * n]
    }

    pub fn block_scale_codes(&self) -> Option<&[Fp8E4M3Code]> {
        self.scale_codes.as_deref()
    }

    pub fn tensor_scale(&self) -> f32 {
        self.tensor_scale
    }

    pub fn has_exact_scales(&self) -> bool {
        self.scale_codes.is_none()
    }
}

fn round_mantissa(x: f32, keep: u32) -> f32 {
    let drop = 23 - keep;
    let bits = x.to_bits();
    let half = 1u32 << (drop - 1);
    let low = bits & ((1 << drop) - 1);
    let mut kept = bits & !((1 << drop) - 1);
    if low > half || (low == half && (kept >> drop) & 1 == 1) {
        kept += 1 << drop;
    }
    f32::from_bits(kept)
}

pub fn tensor_scale(x: &Matrix, policy: TensorScalePolicy) -> Result<f32> {
    if !x.all_finite() {
        return Err(Error::invalid("tensor contains non-finite values"));
    }
    match policy {
        TensorScalePolicy::Unit => Ok(1.0),
        TensorScalePolicy::AmaxCalibrated => {
            let amax = x.amax();
            if amax == 0.0 {
                return Ok(1.0);
            }
            let alpha = round_mantissa(amax / (Q_MAX * S_MAX), TENSOR_SCALE_MANTISSA_BITS);
            Ok(alpha.max(f32::MIN_POSITIVE))
        }
    }
}

fn block_amax(block: &[f32]) -> Result<f32> {
    if block.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("block contains non-finite values"));
    }
    Ok(block.iter().fold(0.0f32, |m, v| m.max(v.abs())))
}

/// E4M3 block scale from the block's largest magnitude.
pub fn block_scale(block: &[f32], alpha: f32) -> Result<Fp8E4M3Code> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("tensor scale {alpha} must be positive and finite")));
    }
    let amax = block_amax(block)?;
    if amax == 0.0 {
        return Ok(Fp8E4M3Code::POS_ZERO);
    }
    pi_e4m3(amax / (alpha * Q_MAX))
}

/// Unrounded block scale, nudged up until no element of the block scales
/// past `q_max`.
fn exact_block_scale(block: &[f32], alpha: f32) -> Result<f32> {
    let amax = block_amax(block)?;
    if amax == 0.0 {
        return Ok(0.0);
    }
    let mut sigma = amax / (alpha * Q_MAX);
    while amax / (alpha * sigma) > Q_MAX {
        sigma = sigma.next_up();
    }
    Ok(sigma)
}

pub fn quantize(x: &Matrix, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    let (rows, cols) = x.shape();
    let g = cfg.group_size;
    if g == 0 || cols % g != 0 {
        return Err(Error::shape(format!(
            "{cols} columns are not divisible by group size {g}"
        )));
    }
    let alpha = tensor_scale(x, cfg.tensor_scale_policy)?;
    let blocks = rows * cols / g;
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(blocks);
    let mut scale_codes = (!cfg.exact_scales).then(|| Vec::with_capacity(blocks));

    for block in x.as_slice().chunks_exact(g) {
        let sigma = match scale_codes.as_mut() {
            Some(sc) => {
                let code = block_scale(block, alpha)?;
                sc.push(code);
                code.decode()?
            }
            None => exact_block_scale(block, alpha)?,
        };
        scales.push(sigma);
        let denom = alpha * sigma;
        if denom == 0.0 {
            codes.extend(std::iter::repeat_n(Fp4Code::POS_ZERO, g));
            continue;
        }
        for &v in block {
            codes.push(pi_fp4(v / denom)?);
        }
    }

    Ok(QuantizedTensor {
        rows,
        cols,
        group_size: g,
        codes,
        scales,
        scale_codes,
        tensor_scale: alpha,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> DequantizedView {
    let g = q.group_size;
    let mut out = Vec::with_capacity(q.rows * q.cols);
    for (block, &sigma) in q.codes.chunks_exact(g).zip(&q.scales) {
        let scale = q.tensor_scale * sigma;
        out.extend(block.iter().map(|c| scale * c.decode()));
    }
    Matrix::from_vec(q.rows, q.cols, out).expect("shape preserved")
}

const MXQT_MAGIC: &[u8; 4] = b"MXQT";
const MXQT_VERSION: u32 = 1;

impl QuantizedTensor {
    /// Debug serialization: `MXQT`, version, rows, cols, group size (u32 LE),
    /// tensor scale (f32 LE), FP4 codes packed two per byte low nibble first,
    /// then one E4M3 byte per block. Row-major throughout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let scale_codes = self
            .scale_codes
            .as_ref()
            .ok_or_else(|| Error::format("exact-scale tensors have no E4M3 encoding"))?;
        let mut out = Vec::with_capacity(24 + self.codes.len() / 2 + scale_codes.len());
        out.extend_from_slice(MXQT_MAGIC);
        out.extend_from_slice(&MXQT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(self.group_size as u32).to_le_bytes());
        out.extend_from_slice(&self.tensor_scale.to_le_bytes());
        for pair in self.codes.chunks(2) {
            let lo = pair[0].bits();
            let hi = pair.get(1).map_or(0, |c| c.bits());
            out.push(lo | (hi << 4));
        }
        out.extend(scale_codes.iter().map(|c| c.bits()));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::disagg::wire::Reader::new(bytes);
        if r.take(4)? != MXQT_MAGIC {
            return Err(Error::format("bad MXQT magic"));
        }
        let version = r.u32()?;
        if version != MXQT_VERSION {
            return Err(Error::format(format!("unsupported MXQT version {version}")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let group_size = r.u32()? as usize;
        let tensor_scale = r.f32()?;
        if group_size == 0 || !cols.is_multiple_of(group_size) {
            return Err(Error::format("MXQT group size does not divide columns"));
        }
        if !(tensor_scale > 0.0 && tensor_scale.is_finite()) {
            return Err(Error::format("MXQT tensor scale must be positive and finite"));
        }
        let n = rows * cols;
        let packed = r.take(n.div_ceil(2))?;
        let codes: Vec<Fp4Code> = packed
            .iter()
            .flat_map(|b| [Fp4Code::from_bits(b & 0x0f), Fp4Code::from_bits(b >> 4)])
            .take(n)
            .collect();
        let scale_codes: Vec<Fp8E4M3Code> = r
            .take(n / group_size)?
            .iter()
            .map(|&b| Fp8E4M3Code::from_bits(b))
            .collect();
        r.finish()?;
        let scales = scale_codes
            .iter()
            .map(|c| c.decode())
            .collect::<Result<Vec<f32>>>()?;
        Ok(QuantizedTensor {
            rows,
            cols,
            group_size,
            codes,
            scales,
            scale_codes: Some(scale_codes),
            tensor_scale,
        })
    }
}
