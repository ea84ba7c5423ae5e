//! One test per acceptance criterion. Each writes a single verdict line
//! past the test harness's output capture, then asserts.

mod common;

use std::io::Write;
use std::process::Command;
use std::thread;
use std::time::Instant;

use common::{
    code_value, fp4_half_gap, fp4_oracle, index, mirror_gemm, mixed_blocks, random_prompt, rel_error, scale_value,
    topk_brute, uniform,
};
use mixquant::analysis::{compare_trajectories, cost_model, topk_mass};
use mixquant::disagg::{deserialize_kv, generate_remote, generate_via_files, serialize_kv, serve_tcp, DecodeWorker, Handler, PrefillWorker};
use mixquant::engine::{generate, ExecutionMode, SamplerSpec};
use mixquant::formats::{format_table, pi_fp4};
use mixquant::model::{init_model, AttentionRecord, Fp4Kernel, Model, ModelConfig, Precision};
use mixquant::qgemm::{qgemm, reference_gemm, Accumulation};
use mixquant::quant::{dequantize, quantize, QuantConfig};
use mixquant::rng::SplitMix64;
use mixquant::tensor::Matrix;

fn verdict(n: u32, name: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let line = format!("acceptance criterion {n:>2} [{status}] {name}: {detail}\n");
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
}

fn random_finite(rng: &mut SplitMix64) -> f32 {
    match rng.next_u64() % 3 {
        0 => uniform(rng, -8.0, 8.0) as f32,
        1 => (uniform(rng, -1.0, 1.0) * 2f64.powi(index(rng, 40) as i32 - 20)) as f32,
        _ => loop {
            let x = f32::from_bits(rng.next_u64() as u32);
            if x.is_finite() {
                break x;
            }
        },
    }
}

#[test]
fn criterion_01_format_exactness() {
    let start = Instant::now();
    let table = format_table();
    let mut section = "";
    let mut fp4 = Vec::new();
    let mut e4m3_max = 0.0f64;
    let mut nan_codes = Vec::new();
    for line in table.lines() {
        if line.starts_with('#') {
            section = line;
            continue;
        }
        let (code, value) = line.split_once(',').unwrap();
        let code = u8::from_str_radix(code.trim_start_matches("0x"), 16).unwrap();
        match (section, value) {
            ("# e2m1", v) => fp4.push(v.parse::<f64>().unwrap()),
            ("# e4m3", "NaN") => nan_codes.push(code),
            ("# e4m3", v) => e4m3_max = e4m3_max.max(v.parse::<f64>().unwrap()),
            _ => unreachable!(),
        }
    }
    let mut expected: Vec<f64> = common::FP4_GRID.iter().flat_map(|&g| [g, -g]).collect();
    let mut got = fp4.clone();
    expected.sort_by(f64::total_cmp);
    got.sort_by(f64::total_cmp);
    let fp4_ok = got == expected && fp4.len() == 16;
    let nan_ok = nan_codes == [0x7f, 0xff];
    let max_ok = e4m3_max == 448.0;

    let mut rng = SplitMix64::new(0xacce);
    let mut mismatches = 0u32;
    for _ in 0..1_000_000 {
        let x = random_finite(&mut rng);
        if pi_fp4(x).unwrap().bits() != fp4_oracle(x) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "format exactness",
        fp4_ok && nan_ok && max_ok && mismatches == 0 && secs < 10.0,
        &format!("fp4_table={fp4_ok} e4m3_max={e4m3_max} nan_codes={nan_codes:02x?} mismatches={mismatches}/1000000 runtime={secs:.2}s"),
    );
}

#[test]
fn criterion_02_quantizer_properties() {
    let mut rng = SplitMix64::new(0x9a11);
    let cfg = QuantConfig::default();
    let exact = QuantConfig::default().with_exact_scales();
    let (mut blocks, mut idem, mut equi, mut zero, mut clip) = (0usize, 0, 0, 0, 0);
    while blocks < 10_000 {
        let spread = index(&mut rng, 7) as i32;
        let x = mixed_blocks(&mut rng, 2, 2, spread);
        blocks += 4;

        let q = quantize(&x, &cfg).unwrap();
        let again = quantize(&dequantize(&q), &cfg).unwrap();
        for b in 0..4 {
            let codes = |t: &mixquant::quant::QuantizedTensor| t.codes()[b * 16..(b + 1) * 16].to_vec();
            if codes(&q) != codes(&again) || q.block_scales()[b] != again.block_scales()[b] || q.tensor_scale() != again.tensor_scale() {
                idem += 1;
            }
        }

        let k = index(&mut rng, 17) as i32 - 8;
        let base = dequantize(&q);
        let shifted = dequantize(&quantize(&x.map(|v| v * 2f32.powi(k)), &cfg).unwrap());
        for (chunk_a, chunk_b) in shifted.as_slice().chunks(16).zip(base.as_slice().chunks(16)) {
            if chunk_a.iter().zip(chunk_b).any(|(&a, &b)| a.to_bits() != (b * 2f32.powi(k)).to_bits()) {
                equi += 1;
            }
        }

        let zb = index(&mut rng, 4);
        let mut zx = x.clone();
        zx.as_mut_slice()[zb * 16..(zb + 1) * 16].fill(0.0);
        let zq = quantize(&zx, &cfg).unwrap();
        let zd = dequantize(&zq);
        if zq.block_scales()[zb] != 0.0
            || zq.codes()[zb * 16..(zb + 1) * 16].iter().any(|c| c.bits() != 0)
            || zd.as_slice()[zb * 16..(zb + 1) * 16].iter().any(|&v| v != 0.0)
        {
            zero += 1;
        }

        let eq = quantize(&x, &exact).unwrap();
        let ed = dequantize(&eq);
        let alpha = f64::from(eq.tensor_scale());
        for b in 0..4 {
            let s = alpha * f64::from(eq.block_scales()[b]);
            let bad = (b * 16..(b + 1) * 16).any(|i| {
                let v = f64::from(x.as_slice()[i]);
                if s == 0.0 {
                    return v != 0.0;
                }
                let scaled = v / s;
                let err = (v - f64::from(ed.as_slice()[i])).abs();
                scaled.abs() > 6.0 * (1.0 + 1e-6) || err > s * fp4_half_gap(scaled.clamp(-6.0, 6.0)) * (1.0 + 1e-6)
            });
            if bad {
                clip += 1;
            }
        }
    }
    verdict(
        2,
        "quantizer properties",
        idem + equi + zero + clip == 0,
        &format!("blocks={blocks} idempotence={idem} equivariance={equi} zero_block={zero} no_clip_half_gap={clip} violations"),
    );
}

#[test]
fn criterion_03_worked_example() {
    let x = Matrix::from_fn(1, 16, |_, _| 3.0);
    let q = quantize(&x, &QuantConfig::unit()).unwrap();
    let sigma = scale_value(q.block_scale_codes().unwrap()[0]);
    let codes_ok = q.codes().iter().all(|&c| code_value(c) == 6.0);
    let recon_ok = dequantize(&q).as_slice().iter().all(|&v| v == 3.0);
    verdict(
        3,
        "all-3.0 worked example",
        sigma == 0.5 && codes_ok && recon_ok,
        &format!("sigma={sigma} codes_all_6={codes_ok} reconstruction_exact={recon_ok}"),
    );
}

#[test]
fn criterion_04_gemm_oracles() {
    let mut rng = SplitMix64::new(0x6e44);
    let cfg = QuantConfig::default();
    let (mut inexact, mut worst) = (0usize, 0.0f64);
    for _ in 0..1000 {
        let (m, n, blocks) = (1 + index(&mut rng, 64), 1 + index(&mut rng, 64), 1 + index(&mut rng, 64));
        let spread = index(&mut rng, 4) as i32;
        let a = quantize(&mixed_blocks(&mut rng, m, blocks, spread), &cfg).unwrap();
        let w = quantize(&mixed_blocks(&mut rng, n, blocks, spread), &cfg).unwrap();
        let y = qgemm(&a, &w).unwrap();
        let mirror = mirror_gemm(&a, &w);
        if y.as_slice().iter().zip(mirror.as_slice()).any(|(p, q)| p.to_bits() != q.to_bits()) {
            inexact += 1;
        }
        let (da, dw) = (dequantize(&a), dequantize(&w));
        let r = reference_gemm(&da, &dw, Accumulation::BlockOrdered).unwrap();
        for i in 0..m {
            for j in 0..n {
                let norm: f64 = da.row(i).iter().zip(dw.row(j)).map(|(&p, &q)| (f64::from(p) * f64::from(q)).abs()).sum();
                if norm > 0.0 {
                    worst = worst.max((f64::from(y.get(i, j)) - r[i * n + j]).abs() / norm);
                }
            }
        }
    }
    verdict(
        4,
        "GEMM oracles",
        inexact == 0 && worst <= 1e-5,
        &format!("instances=1000 mirror_mismatches={inexact} max_relative_error={worst:.3e}"),
    );
}

#[test]
fn criterion_05_identity_collapse() {
    let mut rng = SplitMix64::new(0x1d);
    let mut collapsed = 0;
    let pairs = 12;
    for seed in 0..pairs {
        let cfg = ModelConfig::new(64 + 16 * (seed as usize % 3), 32, 2, 2, 64, 1000 + seed);
        let model = Model::with_kernel(init_model(&cfg).unwrap(), Fp4Kernel::Identity);
        let len = 3 + index(&mut rng, 6);
        let prompt = random_prompt(&mut rng, cfg.vocab_size, len);
        let runs: Vec<_> = ExecutionMode::ALL
            .iter()
            .map(|&mode| {
                let t = generate(&model, &prompt, mode, &SamplerSpec::greedy(10)).unwrap();
                let bits: Vec<Vec<u32>> = t.steps.iter().map(|s| s.log_probs.iter().map(|v| v.to_bits()).collect()).collect();
                (t.tokens(), bits)
            })
            .collect();
        if runs.windows(2).all(|w| w[0] == w[1]) {
            collapsed += 1;
        }
    }
    verdict(
        5,
        "identity-quantizer collapse",
        collapsed == pairs,
        &format!("bit_identical_pairs={collapsed}/{pairs}"),
    );
}

#[test]
fn criterion_06_teacher_forcing() {
    let mut worst = 0.0f64;
    let mut positions = 0;
    for (seed, layers, d, heads, len) in [(1u64, 2usize, 64usize, 4usize, 128usize), (2, 4, 128, 4, 256), (3, 4, 256, 4, 512)] {
        let cfg = ModelConfig::new(256, d, layers, heads, 512, seed);
        let model = Model::new(init_model(&cfg).unwrap());
        let tokens = random_prompt(&mut SplitMix64::new(seed), 256, len);
        let full = model.forward_all(&tokens, Precision::High).unwrap();
        let split = len / 4;
        let out = model.prefill(&tokens[..split], Precision::High).unwrap();
        worst = worst.max(rel_error(&out.logits, full.row(split - 1)));
        let mut kv = out.kv;
        for p in split..len {
            let logits = model.decode_step(&mut kv, tokens[p], Precision::High).unwrap();
            worst = worst.max(rel_error(&logits, full.row(p)));
            positions += 1;
        }
    }
    verdict(
        6,
        "teacher-forcing equivalence",
        worst <= 1e-5,
        &format!("positions={positions} max_relative_logit_error={worst:.3e}"),
    );
}

fn tcp_run(model: &Model, prompt: &[u32], mode: ExecutionMode, sampler: SamplerSpec) -> String {
    let pl = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dl = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let (pa, da) = (pl.local_addr().unwrap(), dl.local_addr().unwrap());
    thread::scope(|s| {
        s.spawn(|| serve_tcp(&pl, &mut || Box::new(PrefillWorker::new(model, mode.prefill_precision())) as Box<dyn Handler>, Some(1), &mut |_| {}).unwrap());
        s.spawn(|| serve_tcp(&dl, &mut || Box::new(DecodeWorker::new(model, mode.decode_precision())) as Box<dyn Handler>, Some(1), &mut |_| {}).unwrap());
        generate_remote(pa, da, model.digest(), prompt, mode, sampler).unwrap()
    })
}

#[test]
fn criterion_07_disaggregation() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xd15a);
    let (mut cases, mut matched) = (0, 0);
    for seed in 0..5u64 {
        let model = Model::new(init_model(&ModelConfig::new(128, 64, 2, 4, 128, 500 + seed)).unwrap());
        let len = 4 + index(&mut rng, 12);
        let prompt = random_prompt(&mut rng, 128, len);
        for mode in ExecutionMode::ALL {
            let sampler = SamplerSpec::greedy(12);
            let mono = generate(&model, &prompt, mode, &sampler).unwrap().dump();
            let dir = tempfile::tempdir().unwrap();
            let files = generate_via_files(&model, &model, dir.path(), model.digest(), &prompt, mode, sampler).unwrap();
            let tcp = tcp_run(&model, &prompt, mode, sampler);
            cases += 2;
            matched += usize::from(files == mono) + usize::from(tcp == mono);
        }
    }

    let model = Model::new(init_model(&ModelConfig::new(64, 32, 2, 2, 64, 77)).unwrap());
    let prompt = [3, 9, 27, 17, 51];
    let kv = model.prefill(&prompt, Precision::Nvfp4).unwrap().kv;
    let blob = serialize_kv(&kv, model.digest(), &prompt).unwrap();
    let round_trip = deserialize_kv(&blob, model.config()).map(|(p, k)| p == prompt && k.bit_eq(&kv)).unwrap_or(false);
    let mut accepted = 0;
    for i in 0..blob.len() {
        let mut bad = blob.clone();
        bad[i] ^= 0x5a;
        if deserialize_kv(&bad, model.config()).is_ok() {
            accepted += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        "disaggregation equivalence",
        matched == cases && round_trip && accepted == 0 && secs < 60.0,
        &format!(
            "matching_trajectories={matched}/{cases} blob_round_trip={round_trip} corrupt_fixtures={} accepted={accepted} runtime={secs:.2}s",
            blob.len()
        ),
    );
}

fn softmax_row(rng: &mut SplitMix64, n: usize) -> Vec<f32> {
    let logits: Vec<f64> = (0..n).map(|_| uniform(rng, -6.0, 6.0)).collect();
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

#[test]
fn criterion_08_metric_oracles() {
    let mut rng = SplitMix64::new(0x8e7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 1 + index(&mut rng, 96);
        let (layers, heads) = (1 + index(&mut rng, 3), 1 + index(&mut rng, 4));
        let rows: Vec<Vec<Vec<f32>>> = (0..layers).map(|_| (0..heads).map(|_| softmax_row(&mut rng, n)).collect()).collect();
        let ks: Vec<usize> = vec![1, 1 + index(&mut rng, n), n];
        let record = AttentionRecord { query_position: n - 1, rows: rows.clone() };
        let report = topk_mass(&record, &ks).unwrap();
        for (ki, &k) in ks.iter().enumerate() {
            for l in 0..layers {
                for h in 0..heads {
                    worst = worst.max((report.fractions[ki][l][h] - topk_brute(&rows[l][h], k)).abs());
                }
            }
        }
    }

    let model = Model::new(init_model(&ModelConfig::new(64, 32, 1, 2, 64, 8)).unwrap());
    let t = generate(&model, &[1, 2, 3], ExecutionMode::UniformFp4, &SamplerSpec::greedy(8)).unwrap();
    let self_kl = compare_trajectories(&t, &t).unwrap().kl.into_iter().fold(0.0f64, f64::max);

    let n = 64;
    let uniform_rows = vec![vec![vec![1.0f32 / n as f32; n]; 2]; 2];
    let ks: Vec<usize> = (1..=n).collect();
    let u = topk_mass(&AttentionRecord { query_position: n - 1, rows: uniform_rows }, &ks).unwrap();
    let uniform_exact = ks.iter().enumerate().all(|(i, &k)| u.fractions[i].iter().flatten().all(|&f| f == k as f64 / n as f64));
    let mut hot = vec![0.0f32; n];
    hot[17] = 1.0;
    let o = topk_mass(&AttentionRecord { query_position: n - 1, rows: vec![vec![hot]] }, &ks).unwrap();
    let one_hot_exact = o.fractions.iter().flatten().flatten().all(|&f| f == 1.0);

    verdict(
        8,
        "metric oracles",
        worst <= 1e-6 && self_kl <= 1e-9 && uniform_exact && one_hot_exact,
        &format!("max_topk_error={worst:.3e} max_self_kl={self_kl:.3e} uniform_exact={uniform_exact} one_hot_exact={one_hot_exact}"),
    );
}

#[test]
fn criterion_09_cost_model() {
    let cfg = ModelConfig::new(512, 256, 4, 4, 4096, 0);
    assert_eq!(cfg.ffn_hidden, 1024);
    let l = 2048usize;
    let r1 = cost_model(&cfg, l, 1, ExecutionMode::MixQuant, 1.0).unwrap();
    let r3 = cost_model(&cfg, l, 1, ExecutionMode::MixQuant, 3.0).unwrap();
    let (d, f, layers) = (256f64, 1024f64, 4f64);
    let closed_form_linear = layers * l as f64 * (4.0 * d * d + 3.0 * d * f);
    let closed_form_attention = layers * (l as f64) * (l as f64) * d;
    let closed_form_share = closed_form_linear / (closed_form_linear + closed_form_attention);
    let linear_share = r1.prefill_fp4_linear_fraction;
    let total_share = r1.prefill_fp4_fraction;
    verdict(
        9,
        "cost model",
        linear_share == 1.0 && total_share >= 0.95 && r1.modeled_prefill_speedup == 1.0,
        &format!(
            "linear_4bit_share={linear_share} total_4bit_share={total_share:.4} (closed form without head {closed_form_share:.4}, required >= 0.95) \
             speedup_at_ratio_1={} speedup_at_ratio_3={:.3}",
            r1.modeled_prefill_speedup, r3.modeled_prefill_speedup
        ),
    );
}

fn compare_modes_cli(seed: u64, json: bool) -> Vec<u8> {
    let seed = seed.to_string();
    let mut args = vec!["compare-modes", "--seed", &seed, "--prompt-tokens", "5,17,42,8,99,3", "--max-new", "24"];
    if json {
        args.push("--json");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_mixquant")).args(&args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

#[test]
fn criterion_10_divergence_experiment() {
    let mut identical = 0;
    let mut complete = 0;
    let mut diverged = [0usize; 3];
    for seed in 0..20u64 {
        let first = compare_modes_cli(seed, true);
        let text = compare_modes_cli(seed, false);
        if first == compare_modes_cli(seed, true) && text == compare_modes_cli(seed, false) {
            identical += 1;
        }
        let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
        let reports = v["reports"].as_array().unwrap();
        if reports.len() == 3 {
            complete += 1;
        }
        for (i, r) in reports.iter().enumerate().take(3) {
            if !r["first_divergence"].is_null() {
                diverged[i] += 1;
            }
        }
    }
    verdict(
        10,
        "divergence experiment",
        identical == 20 && complete == 20,
        &format!(
            "byte_identical_reruns={identical}/20 complete_reports={complete}/20 diverged_within_24_steps(uniform-fp4,mixquant,p16d4)={diverged:?}"
        ),
    );
}
