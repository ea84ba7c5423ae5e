use std::ffi::OsString;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{compare_modes, cost_model, perplexity, topk_mass};
use crate::disagg::{self, DecodeWorker, Frame, Handler, PrefillWorker};
use crate::engine::{generate, ExecutionMode, SamplerSpec, Strategy};
use crate::error::{Error, Result};
use crate::formats::format_table;
use crate::model::{init_model, Model, ModelConfig, ModelWeights, Precision};
use crate::selftest;

#[derive(Debug, Parser)]
#[command(name = "mixquant", version, about = "Phase-aware NVFP4 inference toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialize a seeded model and write it as an MXQW file.
    InitModel {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long)]
        seed: u64,
    },
    /// Generate from a prompt under one execution mode.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: ExecutionMode,
        #[arg(long, value_parser = parse_tokens)]
        prompt_tokens: TokenList,
        #[arg(long)]
        max_new: usize,
        #[arg(long, conflicts_with = "temperature")]
        greedy: bool,
        #[arg(long, requires = "seed")]
        temperature: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        stop: Option<u32>,
        /// Prefill worker address; run disaggregated when set.
        #[arg(long, requires = "decode_addr")]
        prefill_addr: Option<String>,
        #[arg(long, requires = "prefill_addr")]
        decode_addr: Option<String>,
    },
    /// Run all four modes greedily and report divergence from the baseline.
    CompareModes {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, value_parser = parse_tokens)]
        prompt_tokens: TokenList,
        #[arg(long)]
        max_new: usize,
        #[arg(long)]
        json: bool,
    },
    /// Top-k attention mass at the last prompt position.
    AnalyzeAttn {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, value_parser = parse_mode, default_value = "baseline16")]
        mode: ExecutionMode,
        #[arg(long, value_parser = parse_tokens)]
        prompt_tokens: TokenList,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Analytic MAC cost model.
    Cost {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long)]
        prompt_len: usize,
        #[arg(long)]
        gen_len: usize,
        #[arg(long, value_parser = parse_mode)]
        mode: ExecutionMode,
        #[arg(long, default_value_t = 3.0)]
        ratio: f64,
        #[arg(long)]
        json: bool,
    },
    /// Teacher-forced perplexity over a corpus (one comma-separated
    /// sequence per line).
    Perplexity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: ExecutionMode,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Serve prefill requests.
    PrefillWorker {
        #[command(flatten)]
        worker: WorkerArgs,
    },
    /// Serve decode requests.
    DecodeWorker {
        #[command(flatten)]
        worker: WorkerArgs,
    },
    /// Print every FP4 and FP8 E4M3 code with its value.
    DumpFormats,
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    High,
    Nvfp4,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::High => Precision::High,
            PrecisionArg::Nvfp4 => Precision::Nvfp4,
        }
    }
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    precision: PrecisionArg,
    #[arg(long, conflicts_with = "blob_dir", required_unless_present = "blob_dir")]
    listen: Option<String>,
    /// Serve `<role>.req` from this directory into `<role>.resp`.
    #[arg(long)]
    blob_dir: Option<PathBuf>,
    /// Exit after one connection.
    #[arg(long)]
    once: bool,
}

/// Model dimensions; defaults are the documented toy config.
#[derive(Debug, Args, Clone)]
pub struct ShapeArgs {
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 256)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long, default_value_t = 4096)]
    max_seq: usize,
    #[arg(long, default_value_t = 10000.0)]
    rope_base: f64,
}

impl ShapeArgs {
    fn config(&self, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.vocab, self.d_model, self.layers, self.heads, self.max_seq, seed);
        if let Some(ffn) = self.ffn {
            cfg.ffn_hidden = ffn;
        }
        cfg.rope_base = self.rope_base;
        cfg
    }
}

/// Either a model file or a seed for a freshly initialized model.
#[derive(Debug, Args)]
pub struct ModelSource {
    #[arg(long, conflicts_with = "seed", required_unless_present = "seed")]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    max_seq: usize,
}

impl ModelSource {
    fn load(&self) -> Result<Model> {
        let weights = match (&self.model, self.seed) {
            (Some(path), _) => ModelWeights::load(path)?,
            (None, Some(seed)) => init_model(&ModelConfig::new(
                self.vocab,
                self.d_model,
                self.layers,
                self.heads,
                self.max_seq,
                seed,
            ))?,
            (None, None) => return Err(Error::invalid("either --model or --seed is required")),
        };
        Ok(Model::new(weights))
    }
}

#[derive(Debug, Clone)]
pub struct TokenList(pub Vec<u32>);

fn parse_tokens(s: &str) -> std::result::Result<TokenList, String> {
    s.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|e| format!("bad token {t:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .and_then(|v| if v.is_empty() { Err("empty token list".into()) } else { Ok(TokenList(v)) })
}

fn parse_mode(s: &str) -> std::result::Result<ExecutionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_corpus(path: &Path) -> Result<Vec<Vec<u32>>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_tokens(l).map(|t| t.0).map_err(Error::InvalidValue))
        .collect()
}

fn emit(out: &mut dyn Write, json: bool, text: String, value: &impl Serialize) -> Result<()> {
    if json {
        let s = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(out, "{s}")?;
    } else {
        write!(out, "{text}")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PerplexityReport {
    mode: ExecutionMode,
    sequences: usize,
    perplexity: f64,
}

fn make_handler<'m>(model: &'m Model, role: &str, precision: Precision) -> Box<dyn Handler + 'm> {
    if role == "prefill" {
        Box::new(PrefillWorker::new(model, precision))
    } else {
        Box::new(DecodeWorker::new(model, precision))
    }
}

fn run_worker(worker: &WorkerArgs, role: &str, err: &mut dyn Write) -> Result<()> {
    let model = Model::new(ModelWeights::load(&worker.model)?);
    let precision = Precision::from(worker.precision);
    let listener = match (&worker.blob_dir, &worker.listen) {
        (Some(_), _) => None,
        (None, Some(addr)) => {
            let listener = TcpListener::bind(addr)?;
            writeln!(err, "{role}-worker listening on {}", listener.local_addr()?)?;
            err.flush()?;
            Some(listener)
        }
        (None, None) => return Err(Error::invalid("either --listen or --blob-dir is required")),
    };
    let mut log = |f: &Frame| {
        if let Frame::Error { code, message } = f {
            let _ = writeln!(err, "{role}-worker error code={code} message={message}");
        }
    };
    match (listener, &worker.blob_dir) {
        (Some(listener), _) => disagg::serve_tcp(
            &listener,
            &mut || make_handler(&model, role, precision),
            worker.once.then_some(1),
            &mut log,
        ),
        (None, Some(dir)) => {
            let mut handler = make_handler(&model, role, precision);
            disagg::serve_files(&mut handler, dir, role)?.iter().for_each(&mut log);
            Ok(())
        }
        (None, None) => unreachable!("checked above"),
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::InitModel { out: path, shape, seed } => {
            let weights = init_model(&shape.config(seed))?;
            weights.save(&path)?;
            writeln!(out, "wrote {} digest={:016x}", path.display(), weights.digest())?;
        }
        Command::Generate {
            model,
            mode,
            prompt_tokens,
            max_new,
            greedy: _,
            temperature,
            seed,
            stop,
            prefill_addr,
            decode_addr,
        } => {
            let strategy = match temperature {
                Some(temperature) => Strategy::Temperature {
                    temperature,
                    seed: seed.ok_or_else(|| Error::invalid("--temperature needs --seed"))?,
                },
                None => Strategy::Greedy,
            };
            let sampler = SamplerSpec {
                strategy,
                max_new_tokens: max_new,
                stop_token: stop,
            };
            sampler.validate()?;
            let model = Model::new(ModelWeights::load(&model)?);
            let dump = match (prefill_addr, decode_addr) {
                (Some(p), Some(d)) => {
                    disagg::generate_remote(p.as_str(), d.as_str(), model.digest(), &prompt_tokens.0, mode, sampler)?
                }
                _ => generate(&model, &prompt_tokens.0, mode, &sampler)?.dump(),
            };
            write!(out, "{dump}")?;
        }
        Command::CompareModes {
            source,
            prompt_tokens,
            max_new,
            json,
        } => {
            let model = source.load()?;
            let report = compare_modes(&model, &prompt_tokens.0, max_new)?;
            emit(out, json, report.to_text(), &report)?;
        }
        Command::AnalyzeAttn {
            source,
            mode,
            prompt_tokens,
            k,
            json,
        } => {
            let model = source.load()?;
            let prefill = model.prefill_recorded(&prompt_tokens.0, mode.prefill_precision())?;
            let record = prefill.attention.expect("recorded prefill");
            let report = topk_mass(&record, &k)?;
            emit(out, json, report.to_text(), &report)?;
        }
        Command::Cost {
            shape,
            prompt_len,
            gen_len,
            mode,
            ratio,
            json,
        } => {
            let cfg = shape.config(0);
            cfg.validate()?;
            let report = cost_model(&cfg, prompt_len, gen_len, mode, ratio)?;
            emit(out, json, report.to_text(), &report)?;
        }
        Command::Perplexity { model, mode, corpus, json } => {
            let corpus_data = read_corpus(&corpus)?;
            let model = Model::new(ModelWeights::load(&model)?);
            let value = perplexity(&model, mode, &corpus_data)?;
            let report = PerplexityReport {
                mode,
                sequences: corpus_data.len(),
                perplexity: value,
            };
            let text = format!("mode={mode} sequences={} perplexity={value}\n", report.sequences);
            emit(out, json, text, &report)?;
        }
        Command::PrefillWorker { worker } => run_worker(&worker, "prefill", err)?,
        Command::DecodeWorker { worker } => run_worker(&worker, "decode", err)?,
        Command::DumpFormats => write!(out, "{}", format_table())?,
        Command::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                writeln!(out, "selftest {} {status} {}", r.name, r.detail)?;
            }
            if results.iter().any(|r| !r.passed) {
                return Err(Error::invalid("selftest failed"));
            }
        }
    }
    Ok(())
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => {
            let _ = out.flush();
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
