use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;

use crate::disagg::blob::{serialize_kv, KvBlob};
use crate::disagg::frame::{read_payload, write_frame, ErrorCode, Frame};
use crate::engine::{ExecutionMode, SamplerSpec, Session, Trajectory};
use crate::error::{Error, Result};
use crate::model::{KvCache, Model, Precision};

/// Outcome of handling one request frame.
#[derive(Debug)]
pub struct Reply {
    pub frame: Frame,
    pub close: bool,
}

impl Reply {
    fn ok(frame: Frame) -> Self {
        Reply { frame, close: false }
    }

    fn fail(err: &Error) -> Self {
        Reply {
            frame: Frame::error(ErrorCode::for_error(err), err.to_string()),
            close: false,
        }
    }

    fn fatal(code: ErrorCode, message: impl Into<String>) -> Self {
        Reply {
            frame: Frame::error(code, message),
            close: true,
        }
    }
}

pub trait Handler {
    fn handle(&mut self, request: Frame) -> Reply;
}

fn hello(model: &Model, digest: u64) -> Reply {
    if digest == model.digest() {
        Reply::ok(Frame::Hello { digest })
    } else {
        let err = Error::DigestMismatch {
            expected: model.digest(),
            got: digest,
        };
        Reply::fatal(ErrorCode::DigestMismatch, err.to_string())
    }
}

/// Runs prompts through the prefill path and ships the resulting cache.
pub struct PrefillWorker<'m> {
    model: &'m Model,
    precision: Precision,
}

impl<'m> PrefillWorker<'m> {
    pub fn new(model: &'m Model, precision: Precision) -> Self {
        PrefillWorker { model, precision }
    }

    fn prefill(&self, tokens: &[u32]) -> Result<Frame> {
        let out = self.model.prefill(tokens, self.precision)?;
        let blob = serialize_kv(&out.kv, self.model.digest(), tokens)?;
        Ok(Frame::KvBlob {
            blob,
            logits: out.logits,
        })
    }
}

impl Handler for PrefillWorker<'_> {
    fn handle(&mut self, request: Frame) -> Reply {
        match request {
            Frame::Hello { digest } => hello(self.model, digest),
            Frame::PrefillReq { tokens } => match self.prefill(&tokens) {
                Ok(frame) => Reply::ok(frame),
                Err(e) => Reply::fail(&e),
            },
            other => Reply::fatal(
                ErrorCode::Malformed,
                format!("prefill worker does not accept {}", other.name()),
            ),
        }
    }
}

/// Loads transferred caches and decodes from them.
pub struct DecodeWorker<'m> {
    model: &'m Model,
    precision: Precision,
    pending: Option<(Vec<u32>, KvCache, Vec<f32>)>,
}

impl<'m> DecodeWorker<'m> {
    pub fn new(model: &'m Model, precision: Precision) -> Self {
        DecodeWorker {
            model,
            precision,
            pending: None,
        }
    }

    fn load(&mut self, blob: &[u8], logits: Vec<f32>) -> Result<()> {
        let (prompt, kv) = KvBlob::parse(blob)?.into_cache(self.model.config())?;
        if logits.len() != self.model.config().vocab_size {
            return Err(Error::format(format!(
                "expected {} prefill logits, got {}",
                self.model.config().vocab_size,
                logits.len()
            )));
        }
        self.pending = Some((prompt, kv, logits));
        Ok(())
    }

    fn generate(&mut self, mode: ExecutionMode, sampler: SamplerSpec) -> Reply {
        if mode.decode_precision() != self.precision {
            return Reply::ok(Frame::error(
                ErrorCode::ModeMismatch,
                format!("mode {mode} decodes at {:?}, worker runs {:?}", mode.decode_precision(), self.precision),
            ));
        }
        let Some((prompt, kv, logits)) = self.pending.take() else {
            return Reply::ok(Frame::error(ErrorCode::NoCache, "GENERATE_REQ before KV_BLOB"));
        };
        let mut session = Session::from_prefill(self.model, mode, kv, logits);
        match session.generate(&sampler) {
            Ok(steps) => {
                let trajectory = Trajectory {
                    prompt,
                    mode,
                    sampler,
                    digest: self.model.digest(),
                    steps,
                };
                Reply::ok(Frame::Tokens {
                    dump: trajectory.dump(),
                })
            }
            Err(e) => Reply::fail(&e),
        }
    }
}

impl Handler for DecodeWorker<'_> {
    fn handle(&mut self, request: Frame) -> Reply {
        match request {
            Frame::Hello { digest } => hello(self.model, digest),
            Frame::KvBlob { blob, logits } => match self.load(&blob, logits) {
                Ok(()) => Reply::ok(Frame::Hello {
                    digest: self.model.digest(),
                }),
                Err(e) => Reply::fail(&e),
            },
            Frame::GenerateReq { mode, sampler } => self.generate(mode, sampler),
            other => Reply::fatal(
                ErrorCode::Malformed,
                format!("decode worker does not accept {}", other.name()),
            ),
        }
    }
}

/// Serves request frames from `input` until end of stream, writing exactly
/// one reply per request. A malformed frame gets an ERROR reply and ends the
/// session. Returns the ERROR frames sent, for logging.
pub fn serve(handler: &mut impl Handler, input: &mut impl Read, output: &mut impl Write) -> Result<Vec<Frame>> {
    let mut errors = Vec::new();
    loop {
        let reply = match read_payload(input) {
            Ok(None) => return Ok(errors),
            Ok(Some(payload)) => match Frame::decode_payload(&payload) {
                Ok(frame) => handler.handle(frame),
                Err(e) => Reply::fatal(ErrorCode::Malformed, e.to_string()),
            },
            Err(Error::Io(e)) => return Err(Error::Io(e)),
            Err(e) => Reply::fatal(ErrorCode::Malformed, e.to_string()),
        };
        write_frame(output, &reply.frame)?;
        if matches!(reply.frame, Frame::Error { .. }) {
            errors.push(reply.frame.clone());
        }
        if reply.close {
            return Ok(errors);
        }
    }
}

/// File-pair transport: reads `<dir>/<role>.req`, writes `<dir>/<role>.resp`.
pub fn serve_files(handler: &mut impl Handler, dir: &Path, role: &str) -> Result<Vec<Frame>> {
    let mut input = BufReader::new(File::open(dir.join(format!("{role}.req")))?);
    let mut output = BufWriter::new(File::create(dir.join(format!("{role}.resp")))?);
    let errors = serve(handler, &mut input, &mut output)?;
    output.flush()?;
    Ok(errors)
}

/// Accepts connections one at a time; stops after `max_connections` if set.
pub fn serve_tcp<'h>(
    listener: &TcpListener,
    handler_for: &mut dyn FnMut() -> Box<dyn Handler + 'h>,
    max_connections: Option<usize>,
    log: &mut dyn FnMut(&Frame),
) -> Result<()> {
    for (served, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = stream;
        let mut handler = handler_for();
        match serve(&mut handler, &mut reader, &mut writer) {
            Ok(errors) => errors.iter().for_each(&mut *log),
            Err(e) => log(&Frame::error(ErrorCode::Internal, e.to_string())),
        }
        if max_connections.is_some_and(|m| served + 1 >= m) {
            break;
        }
    }
    Ok(())
}

impl Handler for Box<dyn Handler + '_> {
    fn handle(&mut self, request: Frame) -> Reply {
        (**self).handle(request)
    }
}

/// Requests a client sends to a prefill worker.
pub fn prefill_requests(digest: u64, prompt: &[u32]) -> Vec<Frame> {
    vec![
        Frame::Hello { digest },
        Frame::PrefillReq {
            tokens: prompt.to_vec(),
        },
    ]
}

/// Requests a client sends to a decode worker, given the prefill's reply.
pub fn decode_requests(digest: u64, kv_frame: Frame, mode: ExecutionMode, sampler: SamplerSpec) -> Vec<Frame> {
    vec![
        Frame::Hello { digest },
        kv_frame,
        Frame::GenerateReq { mode, sampler },
    ]
}

fn check_reply(frame: Frame) -> Result<Frame> {
    match frame {
        Frame::Error { code, message } => Err(Error::Remote { code, message }),
        other => Ok(other),
    }
}

/// Sends each request and reads its reply over one connection.
pub fn exchange(stream: &mut (impl Read + Write), requests: &[Frame]) -> Result<Vec<Frame>> {
    let mut replies = Vec::with_capacity(requests.len());
    for request in requests {
        write_frame(stream, request)?;
        let payload = read_payload(stream)?
            .ok_or_else(|| Error::Protocol(format!("connection closed awaiting reply to {}", request.name())))?;
        replies.push(check_reply(Frame::decode_payload(&payload)?)?);
    }
    Ok(replies)
}

pub fn write_requests(path: &Path, requests: &[Frame]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in requests {
        write_frame(&mut out, r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_replies(path: &Path) -> Result<Vec<Frame>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(payload) = read_payload(&mut input)? {
        out.push(check_reply(Frame::decode_payload(&payload)?)?);
    }
    Ok(out)
}

fn expect_kv(replies: Vec<Frame>) -> Result<Frame> {
    match replies.into_iter().last() {
        Some(f @ Frame::KvBlob { .. }) => Ok(f),
        other => Err(Error::Protocol(format!("expected KV_BLOB, got {other:?}"))),
    }
}

fn expect_tokens(replies: Vec<Frame>) -> Result<String> {
    match replies.into_iter().last() {
        Some(Frame::Tokens { dump }) => Ok(dump),
        other => Err(Error::Protocol(format!("expected TOKENS, got {other:?}"))),
    }
}

/// Drives a remote prefill worker and a remote decode worker over TCP and
/// returns the trajectory dump.
pub fn generate_remote(
    prefill_addr: impl ToSocketAddrs,
    decode_addr: impl ToSocketAddrs,
    digest: u64,
    prompt: &[u32],
    mode: ExecutionMode,
    sampler: SamplerSpec,
) -> Result<String> {
    let mut prefill = TcpStream::connect(prefill_addr)?;
    let kv = expect_kv(exchange(&mut prefill, &prefill_requests(digest, prompt))?)?;
    drop(prefill);
    let mut decode = TcpStream::connect(decode_addr)?;
    expect_tokens(exchange(&mut decode, &decode_requests(digest, kv, mode, sampler))?)
}

/// Same flow over the file-pair transport, running both workers in-process
/// between the request and reply files in `dir`.
pub fn generate_via_files(
    model_for_prefill: &Model,
    model_for_decode: &Model,
    dir: &Path,
    digest: u64,
    prompt: &[u32],
    mode: ExecutionMode,
    sampler: SamplerSpec,
) -> Result<String> {
    write_requests(&dir.join("prefill.req"), &prefill_requests(digest, prompt))?;
    serve_files(
        &mut PrefillWorker::new(model_for_prefill, mode.prefill_precision()),
        dir,
        "prefill",
    )?;
    let kv = expect_kv(read_replies(&dir.join("prefill.resp"))?)?;
    write_requests(&dir.join("decode.req"), &decode_requests(digest, kv, mode, sampler))?;
    serve_files(
        &mut DecodeWorker::new(model_for_decode, mode.decode_precision()),
        dir,
        "decode",
    )?;
    expect_tokens(read_replies(&dir.join("decode.resp"))?)
}
