//! W4A4 GEMM over NVFP4 tensors.
//!
//! Per output element the FP4 inner product of each 16-wide block is exact
//! in `f32` (every pairwise product of grid values is a multiple of 0.25
//! no larger than 36), then scaled by the block-scale pair and accumulated
//! over blocks in ascending order. The tensor-scale product is applied last.

use crate::error::{Error, Result};
use crate::formats::Fp4Code;
use crate::quant::{DequantizedView, QuantizedTensor};
use crate::tensor::Matrix;

/// Reduction order used by [`qgemm`]. There is only one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    /// Blocks ascending, elements within a block ascending.
    #[default]
    BlockOrdered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub group_size: usize,
    pub accumulation: Accumulation,
}

impl GemmSpec {
    pub fn for_operands(a: &QuantizedTensor, w: &QuantizedTensor) -> Result<Self> {
        if a.cols() != w.cols() {
            return Err(Error::shape(format!(
                "reduction dims differ: {} vs {}",
                a.cols(),
                w.cols()
            )));
        }
        if a.group_size() != w.group_size() {
            return Err(Error::shape(format!(
                "group sizes differ: {} vs {}",
                a.group_size(),
                w.group_size()
            )));
        }
        Ok(GemmSpec {
            m: a.rows(),
            n: w.rows(),
            k: a.cols(),
            group_size: a.group_size(),
            accumulation: Accumulation::BlockOrdered,
        })
    }
}

/// Products of every pair of FP4 codes, indexed by `(a << 4) | b`.
fn product_table() -> [f32; 256] {
    let mut table = [0.0f32; 256];
    for a in Fp4Code::all() {
        for b in Fp4Code::all() {
            table[((a.bits() as usize) << 4) | b.bits() as usize] = a.decode() * b.decode();
        }
    }
    table
}

/// `A · Wᵀ` for `a: m×k` and `w: n×k`, both blocked along `k`.
pub fn qgemm(a: &QuantizedTensor, w: &QuantizedTensor) -> Result<Matrix> {
    let spec = GemmSpec::for_operands(a, w)?;
    let table = product_table();
    let g = spec.group_size;
    let alpha = a.tensor_scale() * w.tensor_scale();
    let mut out = Matrix::zeros(spec.m, spec.n);

    for i in 0..spec.m {
        let a_codes = a.row_codes(i);
        let a_scales = a.row_scales(i);
        for j in 0..spec.n {
            let w_codes = w.row_codes(j);
            let w_scales = w.row_scales(j);
            let mut acc = 0.0f32;
            for (b, (a_block, w_block)) in a_codes.chunks_exact(g).zip(w_codes.chunks_exact(g)).enumerate() {
                let mut inner = 0.0f32;
                for (qa, qw) in a_block.iter().zip(w_block) {
                    inner += table[((qa.bits() as usize) << 4) | qw.bits() as usize];
                }
                acc += (a_scales[b] * w_scales[b]) * inner;
            }
            out.set(i, j, alpha * acc);
        }
    }
    Ok(out)
}

/// Dense `A · Wᵀ` of dequantized operands in `f64`, reducing over `k` in
/// ascending order.
pub fn reference_gemm(
    a: &DequantizedView,
    w: &DequantizedView,
    _order: Accumulation,
) -> Result<Vec<f64>> {
    if a.cols() != w.cols() {
        return Err(Error::shape(format!(
            "reduction dims differ: {} vs {}",
            a.cols(),
            w.cols()
        )));
    }
    let mut out = Vec::with_capacity(a.rows() * w.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..w.rows() {
            let wr = w.row(j);
            out.push(
                ar.iter()
                    .zip(wr)
                    .fold(0.0f64, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y)),
            );
        }
    }
    Ok(out)
}
