//! Metrics over attention rows and generated trajectories, plus an
//! analytic MAC cost model.
//!
//! Every report renders as `key=value` text and serializes to JSON with the
//! same field names.

use serde::Serialize;

use crate::engine::{decode_distribution, generate, ExecutionMode, Sampler, SamplerSpec, Strategy, Trajectory};
use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Model, ModelConfig, Precision};

/// Probability floor used before taking logs in KL.
pub const KL_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopKMassReport {
    pub query_position: usize,
    pub seq_len: usize,
    pub ks: Vec<usize>,
    /// `[k index][layer][head]` fraction of attention mass in the k largest weights.
    pub fractions: Vec<Vec<Vec<f64>>>,
    /// Mean over layers and heads, per k.
    pub mean: Vec<f64>,
}

fn topk_sum(row: &[f32], k: usize) -> f64 {
    let mut sorted: Vec<f32> = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[..k].iter().map(|&w| f64::from(w)).sum()
}

pub fn topk_mass(attn: &AttentionRecord, ks: &[usize]) -> Result<TopKMassReport> {
    let seq_len = attn.query_position + 1;
    if ks.is_empty() {
        return Err(Error::invalid("no k values given"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k < 1 || k > seq_len) {
        return Err(Error::invalid(format!("k = {k} outside 1..={seq_len}")));
    }
    for row in attn.rows.iter().flatten() {
        if row.len() != seq_len {
            return Err(Error::shape(format!("attention row of length {} for {seq_len} keys", row.len())));
        }
    }
    let mut fractions = Vec::with_capacity(ks.len());
    let mut mean = Vec::with_capacity(ks.len());
    for &k in ks {
        let per_layer: Vec<Vec<f64>> = attn
            .rows
            .iter()
            .map(|heads| heads.iter().map(|row| topk_sum(row, k)).collect())
            .collect();
        let all: Vec<f64> = per_layer.iter().flatten().copied().collect();
        mean.push(if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 });
        fractions.push(per_layer);
    }
    Ok(TopKMassReport {
        query_position: attn.query_position,
        seq_len,
        ks: ks.to_vec(),
        fractions,
        mean,
    })
}

impl TopKMassReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("query_position={} seq_len={}\n", self.query_position, self.seq_len);
        for (i, k) in self.ks.iter().enumerate() {
            out.push_str(&format!(
                "k={k} fraction_of_tokens={} mean_mass={}\n",
                *k as f64 / self.seq_len as f64,
                self.mean[i]
            ));
            for (layer, heads) in self.fractions[i].iter().enumerate() {
                let cells: Vec<String> = heads.iter().map(f64::to_string).collect();
                out.push_str(&format!("k={k} layer={layer} heads={}\n", cells.join(",")));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub reference_mode: ExecutionMode,
    pub test_mode: ExecutionMode,
    /// First step index (0-based) where the emitted tokens differ.
    pub first_divergence: Option<usize>,
    /// KL(p_ref ‖ p_test) per compared step.
    pub kl: Vec<f64>,
    pub agree: Vec<bool>,
}

fn kl_divergence(reference: &[f32], test: &[f32]) -> f64 {
    reference
        .iter()
        .zip(test)
        .map(|(&lr, &lt)| {
            let p = f64::from(lr).exp().max(KL_PROB_FLOOR);
            let q = f64::from(lt).exp().max(KL_PROB_FLOOR);
            p * (p.ln() - q.ln())
        })
        .sum()
}

/// Compares over the shared prefix, plus the divergence step when there
/// is one.
pub fn compare_trajectories(reference: &Trajectory, test: &Trajectory) -> Result<DivergenceReport> {
    if reference.prompt != test.prompt {
        return Err(Error::invalid("trajectories have different prompts"));
    }
    let shared = reference.steps.len().min(test.steps.len());
    let first_divergence = (0..shared).find(|&i| reference.steps[i].token != test.steps[i].token);
    let compared = first_divergence.map_or(shared, |d| d + 1);
    let mut kl = Vec::with_capacity(compared);
    let mut agree = Vec::with_capacity(compared);
    for (r, t) in reference.steps.iter().zip(&test.steps).take(compared) {
        if r.log_probs.len() != t.log_probs.len() {
            return Err(Error::shape("step distributions have different vocabularies"));
        }
        kl.push(kl_divergence(&r.log_probs, &t.log_probs));
        agree.push(r.token == t.token);
    }
    Ok(DivergenceReport {
        reference_mode: reference.mode,
        test_mode: test.mode,
        first_divergence,
        kl,
        agree,
    })
}

impl DivergenceReport {
    pub fn mean_kl(&self) -> f64 {
        if self.kl.is_empty() {
            0.0
        } else {
            self.kl.iter().sum::<f64>() / self.kl.len() as f64
        }
    }

    pub fn to_text(&self) -> String {
        let kl: Vec<String> = self.kl.iter().map(f64::to_string).collect();
        let agree: Vec<&str> = self.agree.iter().map(|&a| if a { "1" } else { "0" }).collect();
        format!(
            "reference={} mode={} first_divergence={} steps={} mean_kl={} kl={} agree={}\n",
            self.reference_mode,
            self.test_mode,
            self.first_divergence.map_or("none".to_string(), |d| d.to_string()),
            self.kl.len(),
            self.mean_kl(),
            kl.join(","),
            agree.join(",")
        )
    }
}

/// Runs every mode greedily on one prompt and compares each non-baseline
/// trajectory with the baseline.
#[derive(Debug, Clone, Serialize)]
pub struct CompareModesReport {
    pub digest: String,
    pub prompt: Vec<u32>,
    pub max_new_tokens: usize,
    pub baseline_tokens: Vec<u32>,
    pub reports: Vec<DivergenceReport>,
}

pub fn compare_modes(model: &Model, prompt: &[u32], max_new_tokens: usize) -> Result<CompareModesReport> {
    let sampler = SamplerSpec::greedy(max_new_tokens);
    let baseline = generate(model, prompt, ExecutionMode::Baseline16, &sampler)?;
    let reports = ExecutionMode::ALL[1..]
        .iter()
        .map(|&mode| compare_trajectories(&baseline, &generate(model, prompt, mode, &sampler)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareModesReport {
        digest: format!("{:016x}", model.digest()),
        prompt: prompt.to_vec(),
        max_new_tokens,
        baseline_tokens: baseline.tokens(),
        reports,
    })
}

impl CompareModesReport {
    pub fn to_text(&self) -> String {
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let mut out = format!(
            "digest={} prompt={} max_new={} baseline_tokens={}\n",
            self.digest,
            join(&self.prompt),
            self.max_new_tokens,
            join(&self.baseline_tokens)
        );
        for r in &self.reports {
            out.push_str(&r.to_text());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PhaseCost {
    /// MACs in the seven linear projections.
    pub linear_macs: u64,
    /// QKᵀ and PV MACs; always working precision.
    pub attention_macs: u64,
    /// Output-head MACs; always working precision.
    pub head_macs: u64,
    pub fp4_macs: u64,
    pub high_macs: u64,
}

impl PhaseCost {
    fn new(linear: u64, attention: u64, head: u64, precision: Precision) -> Self {
        let fp4 = if precision == Precision::Nvfp4 { linear } else { 0 };
        PhaseCost {
            linear_macs: linear,
            attention_macs: attention,
            head_macs: head,
            fp4_macs: fp4,
            high_macs: linear + attention + head - fp4,
        }
    }

    pub fn total(&self) -> u64 {
        self.fp4_macs + self.high_macs
    }

    pub fn fp4_linear_fraction(&self) -> f64 {
        ratio(self.fp4_macs, self.linear_macs)
    }

    pub fn fp4_fraction(&self) -> f64 {
        ratio(self.fp4_macs, self.total())
    }

    /// Time at throughput 1 over time with 4-bit MACs running `r` times faster.
    pub fn modeled_speedup(&self, r: f64) -> f64 {
        let total = self.total() as f64;
        if total == 0.0 {
            return 1.0;
        }
        total / (self.fp4_macs as f64 / r + self.high_macs as f64)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub mode: ExecutionMode,
    pub prompt_len: usize,
    pub generated_len: usize,
    pub throughput_ratio: f64,
    pub prefill: PhaseCost,
    pub decode: PhaseCost,
    pub prefill_fp4_linear_fraction: f64,
    pub prefill_fp4_fraction: f64,
    pub total_fp4_fraction: f64,
    pub modeled_prefill_speedup: f64,
    pub modeled_total_speedup: f64,
}

/// Analytic MAC counts for prefilling `prompt_len` tokens and generating
/// `generated_len` tokens. The first generated token comes from the prefill
/// logits, so decode runs `generated_len - 1` forward passes.
///
/// Per layer and token the projections cost `4·d² + 3·d·ffn`. Causal
/// attention at position `p` (1-based) costs `2·p·d` (scores plus weighted
/// values). The tied output head costs `vocab·d` per produced distribution.
pub fn cost_model(
    cfg: &ModelConfig,
    prompt_len: usize,
    generated_len: usize,
    mode: ExecutionMode,
    throughput_ratio: f64,
) -> Result<CostReport> {
    if prompt_len < 1 || generated_len < 1 {
        return Err(Error::invalid("prompt and generation lengths must be at least 1"));
    }
    if !(throughput_ratio > 0.0 && throughput_ratio.is_finite()) {
        return Err(Error::invalid(format!("throughput ratio {throughput_ratio} must be positive")));
    }
    let (d, f, layers, vocab) = (
        cfg.d_model as u64,
        cfg.ffn_hidden as u64,
        cfg.n_layers as u64,
        cfg.vocab_size as u64,
    );
    let (l, t) = (prompt_len as u64, generated_len as u64);
    let per_token_linear = layers * (4 * d * d + 3 * d * f);
    // Σ_{p=a}^{b} 2·p·d summed over layers.
    let attention = |a: u64, b: u64| {
        if b < a {
            0
        } else {
            layers * d * (b * (b + 1) - (a - 1) * a)
        }
    };
    let prefill = PhaseCost::new(l * per_token_linear, attention(1, l), vocab * d, mode.prefill_precision());
    let steps = t - 1;
    let decode = PhaseCost::new(
        steps * per_token_linear,
        attention(l + 1, l + steps),
        steps * vocab * d,
        mode.decode_precision(),
    );
    let total = PhaseCost {
        linear_macs: prefill.linear_macs + decode.linear_macs,
        attention_macs: prefill.attention_macs + decode.attention_macs,
        head_macs: prefill.head_macs + decode.head_macs,
        fp4_macs: prefill.fp4_macs + decode.fp4_macs,
        high_macs: prefill.high_macs + decode.high_macs,
    };
    Ok(CostReport {
        mode,
        prompt_len,
        generated_len,
        throughput_ratio,
        prefill,
        decode,
        prefill_fp4_linear_fraction: prefill.fp4_linear_fraction(),
        prefill_fp4_fraction: prefill.fp4_fraction(),
        total_fp4_fraction: total.fp4_fraction(),
        modeled_prefill_speedup: prefill.modeled_speedup(throughput_ratio),
        modeled_total_speedup: total.modeled_speedup(throughput_ratio),
    })
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.prefill.total() + self.decode.total()
    }

    pub fn to_text(&self) -> String {
        let phase = |name: &str, p: &PhaseCost| {
            format!(
                "{name}.linear_macs={}\n{name}.attention_macs={}\n{name}.head_macs={}\n{name}.fp4_macs={}\n{name}.high_macs={}\n",
                p.linear_macs, p.attention_macs, p.head_macs, p.fp4_macs, p.high_macs
            )
        };
        format!(
            "mode={}\nprompt_len={}\ngenerated_len={}\nthroughput_ratio={}\n{}{}total_macs={}\nprefill_fp4_linear_fraction={}\nprefill_fp4_fraction={}\ntotal_fp4_fraction={}\nmodeled_prefill_speedup={}\nmodeled_total_speedup={}\n",
            self.mode,
            self.prompt_len,
            self.generated_len,
            self.throughput_ratio,
            phase("prefill", &self.prefill),
            phase("decode", &self.decode),
            self.total_macs(),
            self.prefill_fp4_linear_fraction,
            self.prefill_fp4_fraction,
            self.total_fp4_fraction,
            self.modeled_prefill_speedup,
            self.modeled_total_speedup
        )
    }
}

/// Teacher-forced perplexity. Each target token `s[t]` (t ≥ 1) is scored
/// from a fresh pass where the context `s[..t-1]` runs at the mode's prefill
/// precision and the scored position `s[t-1]` at its decode precision.
pub fn perplexity(model: &Model, mode: ExecutionMode, corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut nll = 0.0f64;
    let mut scored = 0usize;
    let mut sampler = Sampler::new(Strategy::Greedy);
    for seq in corpus {
        for t in 1..seq.len() {
            let mut kv = model.new_cache();
            if t >= 2 {
                model.extend(&mut kv, &seq[..t - 1], mode.prefill_precision(), false)?;
            }
            let logits = model.decode_step(&mut kv, seq[t - 1], mode.decode_precision())?;
            let dist = decode_distribution(&logits, &mut sampler)?;
            nll -= f64::from(dist.log_probs[seq[t] as usize]);
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(Error::invalid("corpus has no sequence with at least two tokens"));
    }
    Ok((nll / scored as f64).exp())
}
