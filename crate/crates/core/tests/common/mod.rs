//! Oracles and fixtures shared by the integration tests. Nothing here calls
//! into the code under test except to build inputs.
#![allow(dead_code)]

use mixquant::formats::{Fp4Code, Fp8E4M3Code};
use mixquant::model::{init_model, Model, ModelConfig};
use mixquant::quant::QuantizedTensor;
use mixquant::rng::SplitMix64;
use mixquant::tensor::Matrix;

/// Non-negative E2M1 magnitudes, listed by hand in code order.
pub const FP4_GRID: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// Value of an E2M1 code straight from its bit fields.
pub fn fp4_value(bits: u8) -> f64 {
    let sign = if bits & 0x8 != 0 { -1.0 } else { 1.0 };
    let e = i32::from((bits >> 1) & 0x3);
    let m = f64::from(bits & 0x1);
    let mag = if e == 0 { m * 0.5 } else { (1.0 + m / 2.0) * 2f64.powi(e - 1) };
    sign * mag
}

/// Value of an E4M3 code from its bit fields; `None` for NaN.
pub fn e4m3_value(bits: u8) -> Option<f64> {
    if bits & 0x7f == 0x7f {
        return None;
    }
    let sign = if bits & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = i32::from((bits >> 3) & 0xf);
    let m = f64::from(bits & 0x7);
    let mag = if e == 0 { m / 8.0 * 2f64.powi(-6) } else { (1.0 + m / 8.0) * 2f64.powi(e - 7) };
    Some(sign * mag)
}

/// Exhaustive nearest-grid search over all 16 FP4 codes. Candidates must
/// carry the input's sign; ties go to the code with an even mantissa bit.
pub fn fp4_oracle(x: f32) -> u8 {
    let xc = f64::from(x).clamp(-6.0, 6.0);
    let negative = x.is_sign_negative();
    let mut best: Option<(f64, u8)> = None;
    for bits in 0u8..16 {
        if (bits & 0x8 != 0) != negative {
            continue;
        }
        let d = (xc - fp4_value(bits)).abs();
        best = match best {
            None => Some((d, bits)),
            Some((bd, bb)) if d < bd || (d == bd && bits & 1 == 0 && bb & 1 == 1) => Some((d, bits)),
            keep => keep,
        };
    }
    best.unwrap().1
}

/// Exhaustive nearest-grid search over all finite E4M3 codes with the
/// input's sign. Saturates at 448; ties go to an even mantissa.
pub fn e4m3_oracle(x: f32) -> u8 {
    let xc = f64::from(x).clamp(-448.0, 448.0);
    let negative = x.is_sign_negative();
    let mut best: Option<(f64, u8)> = None;
    for bits in 0u8..=255 {
        if (bits & 0x80 != 0) != negative {
            continue;
        }
        let Some(v) = e4m3_value(bits) else { continue };
        let d = (xc - v).abs();
        best = match best {
            None => Some((d, bits)),
            Some((bd, bb)) if d < bd || (d == bd && bits & 1 == 0 && bb & 1 == 1) => Some((d, bits)),
            keep => keep,
        };
    }
    best.unwrap().1
}

/// Half the width of the FP4 grid interval containing `|v|` (`|v| ≤ 6`).
pub fn fp4_half_gap(v: f64) -> f64 {
    let a = v.abs();
    FP4_GRID
        .windows(2)
        .find(|w| a <= w[1])
        .map(|w| (w[1] - w[0]) / 2.0)
        .expect("value within the grid range")
}

pub fn code_value(c: Fp4Code) -> f64 {
    fp4_value(c.bits())
}

pub fn scale_value(c: Fp8E4M3Code) -> f64 {
    e4m3_value(c.bits()).expect("finite scale")
}

/// Working-precision dequant GEMM that mirrors the kernel's reduction
/// order: per-block FP4 products summed ascending, scaled by the block
/// scale product, blocks accumulated ascending, tensor scales applied last.
pub fn mirror_gemm(a: &QuantizedTensor, w: &QuantizedTensor) -> Matrix {
    let g = a.group_size();
    let alpha = a.tensor_scale() * w.tensor_scale();
    Matrix::from_fn(a.rows(), w.rows(), |i, j| {
        let (ac, wc) = (a.row_codes(i), w.row_codes(j));
        let (asc, wsc) = (a.row_scales(i), w.row_scales(j));
        let mut acc = 0.0f32;
        for b in 0..a.blocks_per_row() {
            let mut inner = 0.0f32;
            for t in b * g..(b + 1) * g {
                inner += (code_value(ac[t]) * code_value(wc[t])) as f32;
            }
            acc += (asc[b] * wsc[b]) * inner;
        }
        alpha * acc
    })
}

/// Sort-and-sum top-k mass.
pub fn topk_brute(row: &[f32], k: usize) -> f64 {
    let mut v: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[..k].iter().sum()
}

pub fn uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

pub fn index(rng: &mut SplitMix64, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

pub fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| uniform(rng, -scale, scale) as f32)
}

/// Rows of 16-wide blocks whose magnitudes span `2^-spread ..= 2^spread`.
pub fn mixed_blocks(rng: &mut SplitMix64, rows: usize, blocks: usize, spread: i32) -> Matrix {
    let mut data = Vec::with_capacity(rows * blocks * 16);
    for _ in 0..rows * blocks {
        let e = index(rng, (2 * spread + 1) as usize) as i32 - spread;
        let scale = 2f64.powi(e);
        data.extend((0..16).map(|_| uniform(rng, -scale, scale) as f32));
    }
    Matrix::from_vec(rows, blocks * 16, data).unwrap()
}

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig::new(96, 32, 2, 2, 128, seed)
}

pub fn small_model(seed: u64) -> Model {
    Model::new(init_model(&small_config(seed)).unwrap())
}

pub fn random_prompt(rng: &mut SplitMix64, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| index(rng, vocab) as u32).collect()
}

/// Largest absolute difference divided by the largest reference magnitude.
pub fn rel_error(test: &[f32], reference: &[f32]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let diff = test
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (&a, &b)| m.max((f64::from(a) - f64::from(b)).abs()));
    if scale == 0.0 { diff } else { diff / scale }
}
