//! Oracle-backed checks run by the `selftest` command.

use crate::disagg::{deserialize_kv, serialize_kv};
use crate::engine::{generate, ExecutionMode, SamplerSpec};
use crate::error::Result;
use crate::formats::{e4m3_decode, pi_e4m3, pi_fp4, Fp4Code, Fp8E4M3Code, Q_MAX, S_MAX};
use crate::model::{init_model, Fp4Kernel, Model, ModelConfig, Precision};
use crate::qgemm::{qgemm, reference_gemm, Accumulation};
use crate::quant::{dequantize, quantize, QuantConfig};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn brute_force_fp4(x: f32) -> Fp4Code {
    let clamped = x.clamp(-Q_MAX, Q_MAX);
    let sign = x.is_sign_negative();
    Fp4Code::all()
        .filter(|c| c.is_negative() == sign)
        .min_by(|a, b| {
            let da = (clamped - a.decode()).abs();
            let db = (clamped - b.decode()).abs();
            da.total_cmp(&db).then((a.bits() & 1).cmp(&(b.bits() & 1)))
        })
        .expect("eight candidates per sign")
}

fn random_value(rng: &mut SplitMix64) -> f32 {
    let magnitude = (rng.next_f64() * 16.0 - 8.0).exp2() * rng.next_f64();
    let v = magnitude as f32;
    if rng.next_u64() & 1 == 0 { v } else { -v }
}

fn formats() -> Result<SuiteResult> {
    let fp4_ok = Fp4Code::all().map(|c| c.decode().abs()).fold(0.0f32, f32::max) == Q_MAX;
    let finite: Vec<f32> = Fp8E4M3Code::all().filter_map(|c| e4m3_decode(c).ok()).collect();
    let fp8_ok = finite.len() == 254 && finite.iter().fold(0.0f32, |m, v| m.max(v.abs())) == S_MAX;
    let mut rng = SplitMix64::new(0x5e1f);
    let mut mismatches = 0;
    for _ in 0..100_000 {
        let x = random_value(&mut rng);
        if pi_fp4(x)? != brute_force_fp4(x) {
            mismatches += 1;
        }
    }
    let round_trip = Fp8E4M3Code::all()
        .filter(|c| !c.is_nan())
        .all(|c| pi_e4m3(e4m3_decode(c).unwrap()).ok() == Some(c));
    Ok(SuiteResult {
        name: "formats",
        passed: fp4_ok && fp8_ok && mismatches == 0 && round_trip,
        detail: format!("fp4_max_ok={fp4_ok} fp8_grid_ok={fp8_ok} fp4_mismatches={mismatches} e4m3_round_trip={round_trip}"),
    })
}

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| (rng.next_f64() * 2.0 - 1.0) as f32 * 3.0)
}

fn quantizer() -> Result<SuiteResult> {
    let mut rng = SplitMix64::new(0x9a7);
    let mut violations = 0;
    let cfg = QuantConfig::default();
    for _ in 0..1000 {
        let x = random_matrix(&mut rng, 2, 32);
        let q = quantize(&x, &cfg)?;
        let again = quantize(&dequantize(&q), &cfg)?;
        if again != q {
            violations += 1;
        }
    }
    Ok(SuiteResult {
        name: "quantizer",
        passed: violations == 0,
        detail: format!("idempotence_violations={violations}"),
    })
}

fn gemm() -> Result<SuiteResult> {
    let mut rng = SplitMix64::new(0x6e);
    let cfg = QuantConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let a = quantize(&random_matrix(&mut rng, 4, 64), &cfg)?;
        let w = quantize(&random_matrix(&mut rng, 6, 64), &cfg)?;
        let y = qgemm(&a, &w)?;
        let (da, dw) = (dequantize(&a), dequantize(&w));
        let reference = reference_gemm(&da, &dw, Accumulation::BlockOrdered)?;
        for i in 0..4 {
            for j in 0..6 {
                let scale: f64 = da
                    .row(i)
                    .iter()
                    .zip(dw.row(j))
                    .map(|(&p, &q)| (f64::from(p) * f64::from(q)).abs())
                    .sum();
                if scale > 0.0 {
                    worst = worst.max((f64::from(y.get(i, j)) - reference[i * 6 + j]).abs() / scale);
                }
            }
        }
    }
    Ok(SuiteResult {
        name: "qgemm",
        passed: worst <= 1e-5,
        detail: format!("max_relative_error={worst}"),
    })
}

fn identity_collapse() -> Result<SuiteResult> {
    let weights = init_model(&ModelConfig::new(64, 32, 2, 2, 64, 21))?;
    let model = Model::with_kernel(weights, Fp4Kernel::Identity);
    let prompt = [3, 14, 15, 9, 26];
    let sampler = SamplerSpec::greedy(8);
    let dumps = ExecutionMode::ALL
        .iter()
        .map(|&m| generate(&model, &prompt, m, &sampler).map(|t| (t.tokens(), t.steps)))
        .collect::<Result<Vec<_>>>()?;
    let passed = dumps.windows(2).all(|w| w[0] == w[1]);
    Ok(SuiteResult {
        name: "identity-collapse",
        passed,
        detail: format!("modes={}", dumps.len()),
    })
}

fn kv_blob() -> Result<SuiteResult> {
    let model = Model::new(init_model(&ModelConfig::new(64, 32, 2, 2, 64, 8))?);
    let prompt = [1, 2, 3, 4, 5, 6];
    let kv = model.prefill(&prompt, Precision::Nvfp4)?.kv;
    let bytes = serialize_kv(&kv, model.digest(), &prompt)?;
    let round_trip = deserialize_kv(&bytes, model.config())?.1.bit_eq(&kv);
    let mut undetected = 0;
    for i in (0..bytes.len()).step_by(7) {
        let mut corrupt = bytes.clone();
        corrupt[i] ^= 0xa5;
        if deserialize_kv(&corrupt, model.config()).is_ok() {
            undetected += 1;
        }
    }
    Ok(SuiteResult {
        name: "kv-blob",
        passed: round_trip && undetected == 0,
        detail: format!("round_trip={round_trip} undetected_corruptions={undetected}"),
    })
}

pub fn run_all() -> Vec<SuiteResult> {
    type Suite = fn() -> Result<SuiteResult>;
    let suites: [(&'static str, Suite); 5] = [
        ("formats", formats),
        ("quantizer", quantizer),
        ("qgemm", gemm),
        ("identity-collapse", identity_collapse),
        ("kv-blob", kv_blob),
    ];
    suites
        .into_iter()
        .map(|(name, suite)| {
            suite().unwrap_or_else(|e| SuiteResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}
