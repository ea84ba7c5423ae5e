//! Length-prefixed frames exchanged between workers and clients.
//!
//! Each frame is a 4-byte big-endian length followed by that many payload
//! bytes. The first payload byte is the frame type; the rest is the body,
//! little-endian throughout:
//!
//! | type | name         | body |
//! |------|--------------|------|
//! | 1    | HELLO        | digest u64 |
//! | 2    | KV_BLOB      | MXQK blob, then u32 count, f32 × count prefill logits, CRC32 of the logits section |
//! | 3    | GENERATE_REQ | mode u8, strategy u8 (0 greedy, 1 temperature), temperature f32, seed u64, max_new u32, has_stop u8, stop u32 |
//! | 4    | TOKENS       | UTF-8 trajectory dump |
//! | 5    | ERROR        | code u16, UTF-8 message |
//! | 6    | PREFILL_REQ  | count u32, tokens u32 × count |

use std::io::{self, Read, Write};

use crate::disagg::blob::KvBlob;
use crate::disagg::wire::{put_f32s, Reader};
use crate::engine::{ExecutionMode, SamplerSpec, Strategy};
use crate::error::{Error, Result};

/// Upper bound on a single frame payload.
pub const MAX_FRAME_LEN: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    Malformed = 1,
    DigestMismatch = 2,
    ContextOverflow = 3,
    BadBlob = 4,
    NoCache = 5,
    ModeMismatch = 6,
    InvalidRequest = 7,
    Internal = 8,
}

impl ErrorCode {
    pub fn for_error(err: &Error) -> ErrorCode {
        match err {
            Error::DigestMismatch { .. } => ErrorCode::DigestMismatch,
            Error::ContextOverflow { .. } => ErrorCode::ContextOverflow,
            Error::Checksum { .. } | Error::Format(_) | Error::Shape(_) => ErrorCode::BadBlob,
            Error::InvalidValue(_) | Error::Position { .. } => ErrorCode::InvalidRequest,
            Error::Protocol(_) => ErrorCode::Malformed,
            _ => ErrorCode::Internal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Hello { digest: u64 },
    KvBlob { blob: Vec<u8>, logits: Vec<f32> },
    GenerateReq { mode: ExecutionMode, sampler: SamplerSpec },
    Tokens { dump: String },
    Error { code: u16, message: String },
    PrefillReq { tokens: Vec<u32> },
}

impl Frame {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Frame {
        Frame::Error {
            code: code as u16,
            message: message.into(),
        }
    }

    pub fn type_byte(&self) -> u8 {
        match self {
            Frame::Hello { .. } => 1,
            Frame::KvBlob { .. } => 2,
            Frame::GenerateReq { .. } => 3,
            Frame::Tokens { .. } => 4,
            Frame::Error { .. } => 5,
            Frame::PrefillReq { .. } => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Frame::Hello { .. } => "HELLO",
            Frame::KvBlob { .. } => "KV_BLOB",
            Frame::GenerateReq { .. } => "GENERATE_REQ",
            Frame::Tokens { .. } => "TOKENS",
            Frame::Error { .. } => "ERROR",
            Frame::PrefillReq { .. } => "PREFILL_REQ",
        }
    }

    /// Payload bytes (type byte plus body), without the length prefix.
    pub fn payload(&self) -> Vec<u8> {
        let mut out = vec![self.type_byte()];
        match self {
            Frame::Hello { digest } => out.extend_from_slice(&digest.to_le_bytes()),
            Frame::KvBlob { blob, logits } => {
                out.extend_from_slice(blob);
                let start = out.len();
                out.extend_from_slice(&(logits.len() as u32).to_le_bytes());
                put_f32s(&mut out, logits);
                let crc = crc32fast::hash(&out[start..]);
                out.extend_from_slice(&crc.to_le_bytes());
            }
            Frame::GenerateReq { mode, sampler } => {
                let (strategy, temperature, seed) = match sampler.strategy {
                    Strategy::Greedy => (0u8, 0.0f32, 0u64),
                    Strategy::Temperature { temperature, seed } => (1, temperature, seed),
                };
                out.push(mode.code());
                out.push(strategy);
                out.extend_from_slice(&temperature.to_le_bytes());
                out.extend_from_slice(&seed.to_le_bytes());
                out.extend_from_slice(&(sampler.max_new_tokens as u32).to_le_bytes());
                out.push(u8::from(sampler.stop_token.is_some()));
                out.extend_from_slice(&sampler.stop_token.unwrap_or(0).to_le_bytes());
            }
            Frame::Tokens { dump } => out.extend_from_slice(dump.as_bytes()),
            Frame::Error { code, message } => {
                out.extend_from_slice(&code.to_le_bytes());
                out.extend_from_slice(message.as_bytes());
            }
            Frame::PrefillReq { tokens } => {
                out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
                for t in tokens {
                    out.extend_from_slice(&t.to_le_bytes());
                }
            }
        }
        out
    }

    /// Length prefix plus payload.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(4 + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode_payload(payload: &[u8]) -> Result<Frame> {
        let (&kind, body) = payload
            .split_first()
            .ok_or_else(|| Error::Protocol("empty frame".into()))?;
        let protocol = |e: Error| Error::Protocol(e.to_string());
        let mut r = Reader::new(body);
        let frame = match kind {
            1 => Frame::Hello {
                digest: r.u64().map_err(protocol)?,
            },
            2 => {
                let (_, used) = KvBlob::parse_prefix(body)?;
                let blob = body[..used].to_vec();
                let section = &body[used..];
                if section.len() < 8 {
                    return Err(Error::format("KV_BLOB frame is missing its logits section"));
                }
                let (values, crc) = section.split_at(section.len() - 4);
                let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
                let computed = crc32fast::hash(values);
                if stored != computed {
                    return Err(Error::Checksum { stored, computed });
                }
                let mut lr = Reader::new(values);
                let n = lr.u32()? as usize;
                let logits = lr.f32_vec(n)?;
                lr.finish()?;
                return Ok(Frame::KvBlob { blob, logits });
            }
            3 => {
                let mode = ExecutionMode::from_code(r.u8().map_err(protocol)?).map_err(protocol)?;
                let strategy = r.u8().map_err(protocol)?;
                let temperature = r.f32().map_err(protocol)?;
                let seed = r.u64().map_err(protocol)?;
                let max_new_tokens = r.u32().map_err(protocol)? as usize;
                let has_stop = r.u8().map_err(protocol)?;
                let stop = r.u32().map_err(protocol)?;
                let strategy = match strategy {
                    0 => Strategy::Greedy,
                    1 => Strategy::Temperature { temperature, seed },
                    other => return Err(Error::Protocol(format!("unknown sampling strategy {other}"))),
                };
                Frame::GenerateReq {
                    mode,
                    sampler: SamplerSpec {
                        strategy,
                        max_new_tokens,
                        stop_token: (has_stop != 0).then_some(stop),
                    },
                }
            }
            4 => {
                let dump = String::from_utf8(body.to_vec())
                    .map_err(|_| Error::Protocol("TOKENS body is not UTF-8".into()))?;
                return Ok(Frame::Tokens { dump });
            }
            5 => {
                let code = r.u16().map_err(protocol)?;
                let message = String::from_utf8_lossy(r.remaining()).into_owned();
                return Ok(Frame::Error { code, message });
            }
            6 => {
                let n = r.u32().map_err(protocol)? as usize;
                let tokens = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>().map_err(protocol)?;
                Frame::PrefillReq { tokens }
            }
            other => return Err(Error::Protocol(format!("unknown frame type {other}"))),
        };
        r.finish().map_err(protocol)?;
        Ok(frame)
    }
}

/// Writes one frame and flushes.
pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}

/// Reads the next raw payload. `Ok(None)` on a clean end of stream between
/// frames.
pub fn read_payload(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut len[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream ended inside a length prefix".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!("invalid frame length {len}")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => {
            Error::Protocol(format!("stream ended inside a {len}-byte frame"))
        }
        _ => e.into(),
    })?;
    Ok(Some(payload))
}

pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    match read_payload(r)? {
        Some(payload) => Frame::decode_payload(&payload).map(Some),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(frame: Frame) {
        let bytes = frame.encode();
        assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        let mut cursor = io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut cursor).unwrap(), Some(frame));
        assert_eq!(read_frame(&mut cursor).unwrap(), None);
    }

    #[test]
    fn frames_round_trip() {
        round_trip(Frame::Hello { digest: 0x0123_4567_89ab_cdef });
        round_trip(Frame::PrefillReq { tokens: vec![1, 5, 9] });
        round_trip(Frame::Tokens { dump: "trajectory x\n".into() });
        round_trip(Frame::error(ErrorCode::DigestMismatch, "nope"));
        round_trip(Frame::GenerateReq {
            mode: ExecutionMode::P16D4,
            sampler: SamplerSpec {
                strategy: Strategy::Temperature { temperature: 0.7, seed: 99 },
                max_new_tokens: 12,
                stop_token: Some(3),
            },
        });
        round_trip(Frame::GenerateReq {
            mode: ExecutionMode::MixQuant,
            sampler: SamplerSpec::greedy(4),
        });
    }

    #[test]
    fn hello_layout() {
        let bytes = Frame::Hello { digest: 1 }.encode();
        assert_eq!(bytes, [0, 0, 0, 9, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn unknown_type_is_protocol_error() {
        let mut cursor = io::Cursor::new(vec![0, 0, 0, 1, 42]);
        assert!(matches!(read_frame(&mut cursor), Err(Error::Protocol(_))));
    }

    #[test]
    fn length_must_match_payload() {
        let mut bytes = Frame::Hello { digest: 7 }.encode();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(read_frame(&mut io::Cursor::new(bytes)), Err(Error::Protocol(_))));
        // Declared length longer than the body that HELLO expects.
        let mut padded = Frame::Hello { digest: 7 }.payload();
        padded.push(0);
        assert!(Frame::decode_payload(&padded).is_err());
        assert!(matches!(
            read_frame(&mut io::Cursor::new(vec![0, 0, 0, 0])),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(read_frame(&mut io::Cursor::new(vec![0, 0])), Err(Error::Protocol(_))));
    }
}
