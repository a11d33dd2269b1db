//! Shared-memory mailbox channels.
//!
//! A channel is one 4096-byte buffer in the shared communication
//! region with a fixed wire layout:
//!
//! ```text
//! offset 0      1 byte   status: 0 = empty, 1 = full
//! offset 1      4 bytes  payload length, little-endian
//! offset 5      4 bytes  sequence number, little-endian
//! offset 9   4087 bytes  payload
//! ```
//!
//! The writer fills payload, length and seq first and flips status to
//! full last; the reader copies out and flips status back to empty.
//! Messages longer than one payload are chunked with a handshake per
//! chunk. The layout is normative: tests and the decoder treat it as
//! bit-exact.

use crate::mem::Gpa;
use crate::sandbox::SandboxId;
use crate::{Error, Result};

pub const MAILBOX_BYTES: usize = 4096;
pub const HEADER_BYTES: usize = 9;
pub const MAX_PAYLOAD: usize = MAILBOX_BYTES - HEADER_BYTES;

pub const STATUS_EMPTY: u8 = 0;
pub const STATUS_FULL: u8 = 1;

pub const OFF_STATUS: usize = 0;
pub const OFF_LENGTH: usize = 1;
pub const OFF_SEQ: usize = 5;
pub const OFF_PAYLOAD: usize = 9;

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ChannelId(pub u32);

/// One mailbox buffer shared by exactly two sandboxes.
#[derive(Clone, Debug)]
pub struct Channel {
    pub id: ChannelId,
    pub a: SandboxId,
    pub b: SandboxId,
    pub buffer_gpa: Gpa,
    pub private: bool,
}

impl Channel {
    pub fn is_endpoint(&self, sb: SandboxId) -> bool {
        self.a == sb || self.b == sb
    }

    pub fn peer(&self, sb: SandboxId) -> Option<SandboxId> {
        if sb == self.a {
            Some(self.b)
        } else if sb == self.b {
            Some(self.a)
        } else {
            None
        }
    }
}

/// A decoded full mailbox.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Frame {
    pub seq: u32,
    pub payload: Vec<u8>,
}

/// Why a buffer failed to decode.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum DecodeError {
    /// Fewer bytes than one mailbox.
    Truncated,
    /// Status byte is neither empty nor full.
    BadStatus(u8),
    /// Length field exceeds the payload area.
    BadLength(u32),
}

/// Reads a mailbox image. `Ok(None)` is an empty mailbox; errors mean
/// the buffer is corrupt (possible after a fault blast). Total over
/// arbitrary input: never panics, regardless of contents or length.
pub fn decode(buf: &[u8]) -> std::result::Result<Option<Frame>, DecodeError> {
    if buf.len() < MAILBOX_BYTES {
        return Err(DecodeError::Truncated);
    }
    match buf[OFF_STATUS] {
        STATUS_EMPTY => Ok(None),
        STATUS_FULL => {
            let length = u32::from_le_bytes(buf[OFF_LENGTH..OFF_LENGTH + 4].try_into().unwrap());
            if length as usize > MAX_PAYLOAD {
                return Err(DecodeError::BadLength(length));
            }
            let seq = u32::from_le_bytes(buf[OFF_SEQ..OFF_SEQ + 4].try_into().unwrap());
            let payload = buf[OFF_PAYLOAD..OFF_PAYLOAD + length as usize].to_vec();
            Ok(Some(Frame { seq, payload }))
        }
        other => Err(DecodeError::BadStatus(other)),
    }
}

/// Encodes one chunk into a full mailbox image with status already
/// flipped to full. The two-phase variant below matches the protocol;
/// this one is for tests and tooling.
pub fn encode(seq: u32, payload: &[u8]) -> Result<[u8; MAILBOX_BYTES]> {
    let mut buf = [0u8; MAILBOX_BYTES];
    write_body(&mut buf, seq, payload)?;
    buf[OFF_STATUS] = STATUS_FULL;
    Ok(buf)
}

/// Fills length, seq and payload, leaving status untouched. The writer
/// flips status separately, after the body is in place.
pub fn write_body(buf: &mut [u8; MAILBOX_BYTES], seq: u32, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::Config(format!(
            "chunk of {} bytes exceeds mailbox payload capacity {MAX_PAYLOAD}",
            payload.len()
        )));
    }
    buf[OFF_LENGTH..OFF_LENGTH + 4].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    buf[OFF_SEQ..OFF_SEQ + 4].copy_from_slice(&seq.to_le_bytes());
    buf[OFF_PAYLOAD..OFF_PAYLOAD + payload.len()].copy_from_slice(payload);
    Ok(())
}

/// The body bytes (offsets 1..9+len) a sender writes before flipping
/// status: length, seq, payload.
pub fn body_bytes(seq: u32, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::Config(format!(
            "chunk of {} bytes exceeds mailbox payload capacity {MAX_PAYLOAD}",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Number of mailbox handshakes a message of `size` bytes needs. The
/// empty message still performs one handshake.
pub fn chunk_count(size: usize) -> usize {
    if size == 0 {
        1
    } else {
        size.div_ceil(MAX_PAYLOAD)
    }
}

/// Splits a message into mailbox-sized chunks; the empty message gives
/// one empty chunk so the handshake still happens.
pub fn chunks(payload: &[u8]) -> Vec<&[u8]> {
    if payload.is_empty() {
        vec![&[]]
    } else {
        payload.chunks(MAX_PAYLOAD).collect()
    }
}

/// Deterministic test payload for benchmark messages: byte k of chunk
/// seq s is a mix of both, so reassembly errors cannot cancel out.
pub fn pattern_byte(seq: u32, k: usize) -> u8 {
    (seq as usize).wrapping_mul(31).wrapping_add(k) as u8
}
