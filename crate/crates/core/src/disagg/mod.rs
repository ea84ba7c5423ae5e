//! Prefill/decode worker split with a bit-exact KV transfer format.
//!
//! A client sends `HELLO` and `PREFILL_REQ` to a prefill worker, which
//! replies `HELLO` and `KV_BLOB`. The client forwards that `KV_BLOB` to a
//! decode worker after its own `HELLO`; the decode worker acknowledges a
//! valid blob with `HELLO` and answers the following `GENERATE_REQ` with
//! `TOKENS`. Every request gets exactly one reply, so the byte streams are
//! the same whether they travel over TCP or through request/reply files.

mod blob;
mod frame;
pub mod wire;
mod worker;

pub use blob::{deserialize_kv, serialize_kv, KvBlob, KV_MAGIC, KV_VERSION};
pub use frame::{read_frame, read_payload, write_frame, ErrorCode, Frame, MAX_FRAME_LEN};
pub use worker::{
    decode_requests, exchange, generate_remote, generate_via_files, prefill_requests,
    read_replies, serve, serve_files, serve_tcp, write_requests, DecodeWorker, Handler,
    PrefillWorker, Reply,
};
