//! Value-log record codec.
//!
//! A record is `[key_len: u32 LE][value_len: u32 LE][key][value]`. Bit 31 of
//! `key_len` is the tombstone flag. Records never span a segment boundary;
//! the log pads with zeros instead, so a zero `key_len` marks padding.

use crate::device::DeviceOffset;
use crate::engine::{EngineError, Result};

pub const RECORD_HEADER_LEN: usize = 8;
pub const MAX_KEY_LEN: usize = 255;
pub const MAX_VALUE_LEN: usize = 64 * 1024;

const TOMBSTONE_BIT: u32 = 1 << 31;

/// Location of a record in the value log, plus its tombstone flag.
///
/// When stored in a leaf entry the pair packs into a single u64 with the
/// flag in bit 63; the low 63 bits are the device offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueLogPointer {
    pub offset: DeviceOffset,
    pub tombstone: bool,
}

const PTR_TOMBSTONE_BIT: u64 = 1 << 63;

impl ValueLogPointer {
    pub fn new(offset: DeviceOffset, tombstone: bool) -> Self {
        debug_assert_eq!(offset.0 & PTR_TOMBSTONE_BIT, 0);
        ValueLogPointer { offset, tombstone }
    }

    pub fn to_raw(self) -> u64 {
        self.offset.0 | if self.tombstone { PTR_TOMBSTONE_BIT } else { 0 }
    }

    pub fn from_raw(raw: u64) -> Self {
        ValueLogPointer {
            offset: DeviceOffset(raw & !PTR_TOMBSTONE_BIT),
            tombstone: raw & PTR_TOMBSTONE_BIT != 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub tombstone: bool,
}

impl LogRecord {
    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + self.key.len() + self.value.len()
    }
}

pub fn encoded_record_len(key_len: usize, value_len: usize) -> usize {
    RECORD_HEADER_LEN + key_len + value_len
}

pub fn encode_record(key: &[u8], value: &[u8], tombstone: bool) -> Result<Vec<u8>> {
    if key.is_empty() || key.len() > MAX_KEY_LEN {
        return Err(EngineError::InvalidKey(key.len()));
    }
    if value.len() > MAX_VALUE_LEN {
        return Err(EngineError::InvalidValue(value.len()));
    }
    let mut out = Vec::with_capacity(encoded_record_len(key.len(), value.len()));
    let key_len = key.len() as u32 | if tombstone { TOMBSTONE_BIT } else { 0 };
    out.extend_from_slice(&key_len.to_le_bytes());
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(value);
    Ok(out)
}

/// Decode the header portion: (key_len, value_len, tombstone).
pub fn decode_header(buf: &[u8]) -> Result<(usize, usize, bool)> {
    if buf.len() < RECORD_HEADER_LEN {
        return Err(EngineError::CorruptRecord);
    }
    let raw_key_len = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    let tombstone = raw_key_len & TOMBSTONE_BIT != 0;
    let key_len = (raw_key_len & !TOMBSTONE_BIT) as usize;
    let value_len = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if key_len == 0 || key_len > MAX_KEY_LEN || value_len > MAX_VALUE_LEN {
        return Err(EngineError::CorruptRecord);
    }
    Ok((key_len, value_len, tombstone))
}

/// Decode a full record from the start of `buf`, returning it and the bytes consumed.
pub fn decode_record(buf: &[u8]) -> Result<(LogRecord, usize)> {
    let (key_len, value_len, tombstone) = decode_header(buf)?;
    let total = RECORD_HEADER_LEN + key_len + value_len;
    if buf.len() < total {
        return Err(EngineError::CorruptRecord);
    }
    let key = buf[RECORD_HEADER_LEN..RECORD_HEADER_LEN + key_len].to_vec();
    let value = buf[RECORD_HEADER_LEN + key_len..total].to_vec();
    Ok((LogRecord { key, value, tombstone }, total))
}
