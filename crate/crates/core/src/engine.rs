//! Phase-wise precision modes and trajectory generation.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{KvCache, Model, Precision};
use crate::rng::SplitMix64;

/// How many alternatives each dumped step lists.
pub const DUMP_TOP_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutionMode {
    /// High-precision prefill and decode.
    Baseline16,
    /// NVFP4 prefill and decode.
    UniformFp4,
    /// NVFP4 prefill, high-precision decode.
    MixQuant,
    /// High-precision prefill, NVFP4 decode.
    P16D4,
}

impl ExecutionMode {
    pub const ALL: [ExecutionMode; 4] = [
        ExecutionMode::Baseline16,
        ExecutionMode::UniformFp4,
        ExecutionMode::MixQuant,
        ExecutionMode::P16D4,
    ];

    pub fn prefill_precision(self) -> Precision {
        match self {
            ExecutionMode::Baseline16 | ExecutionMode::P16D4 => Precision::High,
            ExecutionMode::UniformFp4 | ExecutionMode::MixQuant => Precision::Nvfp4,
        }
    }

    pub fn decode_precision(self) -> Precision {
        match self {
            ExecutionMode::Baseline16 | ExecutionMode::MixQuant => Precision::High,
            ExecutionMode::UniformFp4 | ExecutionMode::P16D4 => Precision::Nvfp4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExecutionMode::Baseline16 => "baseline16",
            ExecutionMode::UniformFp4 => "uniform-fp4",
            ExecutionMode::MixQuant => "mixquant",
            ExecutionMode::P16D4 => "p16d4",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ExecutionMode::Baseline16 => 0,
            ExecutionMode::UniformFp4 => 1,
            ExecutionMode::MixQuant => 2,
            ExecutionMode::P16D4 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        ExecutionMode::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| Error::format(format!("unknown execution mode code {code}")))
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExecutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExecutionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown mode {s:?}; expected baseline16, uniform-fp4, mixquant or p16d4"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Temperature { temperature: f32, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSpec {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub stop_token: Option<u32>,
}

impl SamplerSpec {
    pub fn greedy(max_new_tokens: usize) -> Self {
        SamplerSpec {
            strategy: Strategy::Greedy,
            max_new_tokens,
            stop_token: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Strategy::Temperature { temperature, .. } = self.strategy {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::invalid(format!("temperature {temperature} must be positive")));
            }
        }
        Ok(())
    }

    fn header_fields(&self) -> String {
        let (sampler, seed) = match self.strategy {
            Strategy::Greedy => ("greedy".to_string(), "none".to_string()),
            Strategy::Temperature { temperature, seed } => {
                (format!("temperature:{temperature}"), seed.to_string())
            }
        };
        let stop = self.stop_token.map_or("none".to_string(), |t| t.to_string());
        format!("sampler={sampler} seed={seed} max_new={} stop={stop}", self.max_new_tokens)
    }
}

/// One sampled token with its step distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub token: u32,
    pub probs: Vec<f32>,
    pub log_probs: Vec<f32>,
}

/// Stateful sampler; temperature sampling consumes its own SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct Sampler {
    strategy: Strategy,
    rng: Option<SplitMix64>,
}

impl Sampler {
    pub fn new(strategy: Strategy) -> Self {
        let rng = match strategy {
            Strategy::Greedy => None,
            Strategy::Temperature { seed, .. } => Some(SplitMix64::new(seed)),
        };
        Sampler { strategy, rng }
    }

    pub fn sample(&mut self, logits: &[f32]) -> Result<Distribution> {
        decode_distribution(logits, self)
    }
}

/// Softmax over `logits` (divided by the temperature, if any) and a token
/// choice. Greedy ties go to the lowest id; temperature sampling inverts the
/// CDF over ascending ids with one uniform draw.
pub fn decode_distribution(logits: &[f32], sampler: &mut Sampler) -> Result<Distribution> {
    if logits.is_empty() {
        return Err(Error::invalid("empty logits"));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("logit {i} is not finite")));
    }
    let scaled: Vec<f32> = match sampler.strategy {
        Strategy::Greedy => logits.to_vec(),
        Strategy::Temperature { temperature, .. } => logits.iter().map(|l| l / temperature).collect(),
    };
    let max = scaled.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let shifted: Vec<f32> = scaled.iter().map(|l| l - max).collect();
    let exps: Vec<f32> = shifted.iter().map(|s| s.exp()).collect();
    let sum: f32 = exps.iter().sum();
    let log_sum = sum.ln();
    let probs: Vec<f32> = exps.iter().map(|e| e / sum).collect();
    let log_probs: Vec<f32> = shifted.iter().map(|s| s - log_sum).collect();

    let token = match (&sampler.strategy, sampler.rng.as_mut()) {
        (Strategy::Temperature { .. }, Some(rng)) => {
            let u = rng.next_f64();
            let mut cumulative = 0.0f64;
            let mut chosen = None;
            for (i, &p) in probs.iter().enumerate() {
                cumulative += f64::from(p);
                if u < cumulative {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave the CDF just short of u.
            chosen.unwrap_or_else(|| probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
        }
        _ => argmax_lowest(logits),
    };
    Ok(Distribution {
        token: token as u32,
        probs,
        log_probs,
    })
}

fn argmax_lowest(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub token: u32,
    /// Log-probabilities over the whole vocabulary.
    pub log_probs: Vec<f32>,
}

impl Step {
    /// `(token, log_prob)` pairs by descending probability, ties by id.
    pub fn top(&self, k: usize) -> Vec<(u32, f32)> {
        let mut ids: Vec<usize> = (0..self.log_probs.len()).collect();
        ids.sort_by(|&a, &b| self.log_probs[b].total_cmp(&self.log_probs[a]).then(a.cmp(&b)));
        ids.into_iter()
            .take(k)
            .map(|i| (i as u32, self.log_probs[i]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<u32>,
    pub mode: ExecutionMode,
    pub sampler: SamplerSpec,
    pub digest: u64,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    /// Line-oriented dump: a header line, then one line per step with the
    /// top-8 `(id:log_prob)` pairs.
    pub fn dump(&self) -> String {
        let prompt: Vec<String> = self.prompt.iter().map(u32::to_string).collect();
        let mut out = format!(
            "trajectory mode={} {} digest={:016x} prompt={}\n",
            self.mode,
            self.sampler.header_fields(),
            self.digest,
            prompt.join(",")
        );
        for (i, step) in self.steps.iter().enumerate() {
            let top: Vec<String> = step
                .top(DUMP_TOP_K)
                .into_iter()
                .map(|(id, lp)| format!("{id}:{lp}"))
                .collect();
            out.push_str(&format!("step={i} token={} top={}\n", step.token, top.join(",")));
        }
        out
    }
}

/// Token ids listed in a trajectory dump, in step order.
pub fn dump_tokens(dump: &str) -> Result<Vec<u32>> {
    let mut lines = dump.lines();
    match lines.next() {
        Some(h) if h.starts_with("trajectory ") => {}
        _ => return Err(Error::format("missing trajectory header")),
    }
    lines
        .map(|line| {
            line.split(' ')
                .find_map(|f| f.strip_prefix("token="))
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::format(format!("bad step line {line:?}")))
        })
        .collect()
}

/// One sequence's cache and pending state under a fixed mode.
///
/// Prompt chunks always run at the mode's prefill precision and generated
/// tokens at its decode precision, so follow-up turns re-enter the prefill
/// path while every generated token's KV entry comes from the decode path.
#[derive(Debug)]
pub struct Session<'m> {
    model: &'m Model,
    mode: ExecutionMode,
    kv: KvCache,
    logits: Option<Vec<f32>>,
    unfed: Option<u32>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, mode: ExecutionMode) -> Self {
        Session {
            model,
            mode,
            kv: model.new_cache(),
            logits: None,
            unfed: None,
        }
    }

    /// Resumes from a transferred cache and the prefill's last logits.
    pub fn from_prefill(model: &'m Model, mode: ExecutionMode, kv: KvCache, logits: Vec<f32>) -> Self {
        Session {
            model,
            mode,
            kv,
            logits: Some(logits),
            unfed: None,
        }
    }

    pub fn kv(&self) -> &KvCache {
        &self.kv
    }

    pub fn into_kv(self) -> KvCache {
        self.kv
    }

    /// Appends prompt tokens through the prefill path.
    pub fn feed_prompt(&mut self, tokens: &[u32]) -> Result<()> {
        if let Some(token) = self.unfed.take() {
            self.model
                .decode_step(&mut self.kv, token, self.mode.decode_precision())?;
        }
        let (logits, _) = self
            .model
            .extend(&mut self.kv, tokens, self.mode.prefill_precision(), false)?;
        self.logits = Some(logits);
        Ok(())
    }

    pub fn generate(&mut self, spec: &SamplerSpec) -> Result<Vec<Step>> {
        spec.validate()?;
        let mut logits = self
            .logits
            .take()
            .ok_or_else(|| Error::invalid("no prompt has been fed"))?;
        let mut sampler = Sampler::new(spec.strategy);
        let mut steps = Vec::with_capacity(spec.max_new_tokens);
        if spec.max_new_tokens == 0 {
            self.logits = Some(logits);
            return Ok(steps);
        }
        loop {
            let dist = sampler.sample(&logits)?;
            let token = dist.token;
            steps.push(Step {
                token,
                log_probs: dist.log_probs,
            });
            if steps.len() == spec.max_new_tokens || spec.stop_token == Some(token) {
                self.unfed = Some(token);
                return Ok(steps);
            }
            logits = self
                .model
                .decode_step(&mut self.kv, token, self.mode.decode_precision())?;
        }
    }
}

pub fn generate(
    model: &Model,
    prompt: &[u32],
    mode: ExecutionMode,
    sampler: &SamplerSpec,
) -> Result<Trajectory> {
    sampler.validate()?;
    let mut session = Session::new(model, mode);
    session.feed_prompt(prompt)?;
    let steps = session.generate(sampler)?;
    Ok(Trajectory {
        prompt: prompt.to_vec(),
        mode,
        sampler: *sampler,
        digest: model.digest(),
        steps,
    })
}
