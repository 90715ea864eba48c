//! On-device B+-tree node layouts.
//!
//! Nodes are fixed-size blocks packed into index segments. Layouts are
//! little-endian and versioned by the leading kind byte:
//!
//! Leaf (kind 1): `[kind:1][pad:1][count:2]` then `count` entries of
//! `[key_prefix:12][value_loc:8]`. `value_loc` packs the device offset in
//! bits 0..63 and the tombstone flag in bit 63.
//!
//! Internal (kind 2): `[kind:1][pad:1][count:2][first_child:8]` then `count`
//! entries of `[pivot_len:2][pivot][child:8]`. Pivot `i` is the smallest key
//! reachable through child `i+1`.
//!
//! A zero kind byte marks an unused node slot (segment slack).

use crate::engine::{EngineError, Result};

pub const KEY_PREFIX_LEN: usize = 12;
pub const NODE_KIND_FREE: u8 = 0;
pub const NODE_KIND_LEAF: u8 = 1;
pub const NODE_KIND_INTERNAL: u8 = 2;

pub const LEAF_HEADER_LEN: usize = 4;
pub const LEAF_ENTRY_LEN: usize = KEY_PREFIX_LEN + 8;
pub const INTERNAL_HEADER_LEN: usize = 12;

/// Truncate or zero-pad `key` to the fixed prefix width.
pub fn key_prefix(key: &[u8]) -> [u8; KEY_PREFIX_LEN] {
    let mut out = [0u8; KEY_PREFIX_LEN];
    let n = key.len().min(KEY_PREFIX_LEN);
    out[..n].copy_from_slice(&key[..n]);
    out
}

pub fn leaf_capacity(node_size: usize) -> usize {
    (node_size - LEAF_HEADER_LEN) / LEAF_ENTRY_LEN
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafNode {
    /// Sorted by (prefix, full key via log on ties).
    pub entries: Vec<([u8; KEY_PREFIX_LEN], u64)>,
}

impl LeafNode {
    pub fn encode(&self, node_size: usize) -> Vec<u8> {
        debug_assert!(self.entries.len() <= leaf_capacity(node_size));
        let mut buf = vec![0u8; node_size];
        buf[0] = NODE_KIND_LEAF;
        buf[2..4].copy_from_slice(&(self.entries.len() as u16).to_le_bytes());
        let mut pos = LEAF_HEADER_LEN;
        for (prefix, loc) in &self.entries {
            buf[pos..pos + KEY_PREFIX_LEN].copy_from_slice(prefix);
            buf[pos + KEY_PREFIX_LEN..pos + LEAF_ENTRY_LEN].copy_from_slice(&loc.to_le_bytes());
            pos += LEAF_ENTRY_LEN;
        }
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<LeafNode> {
        if buf.len() < LEAF_HEADER_LEN || buf[0] != NODE_KIND_LEAF {
            return Err(EngineError::CorruptNode);
        }
        let count = u16::from_le_bytes(buf[2..4].try_into().unwrap()) as usize;
        if LEAF_HEADER_LEN + count * LEAF_ENTRY_LEN > buf.len() {
            return Err(EngineError::CorruptNode);
        }
        let mut entries = Vec::with_capacity(count);
        let mut pos = LEAF_HEADER_LEN;
        for _ in 0..count {
            let mut prefix = [0u8; KEY_PREFIX_LEN];
            prefix.copy_from_slice(&buf[pos..pos + KEY_PREFIX_LEN]);
            let loc = u64::from_le_bytes(buf[pos + KEY_PREFIX_LEN..pos + LEAF_ENTRY_LEN].try_into().unwrap());
            entries.push((prefix, loc));
            pos += LEAF_ENTRY_LEN;
        }
        Ok(LeafNode { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InternalNode {
    pub first_child: u64,
    pub pivots: Vec<(Vec<u8>, u64)>,
}

impl InternalNode {
    pub fn encoded_len(&self) -> usize {
        INTERNAL_HEADER_LEN + self.pivots.iter().map(|(p, _)| 2 + p.len() + 8).sum::<usize>()
    }

    pub fn encode(&self, node_size: usize) -> Vec<u8> {
        debug_assert!(self.encoded_len() <= node_size);
        let mut buf = vec![0u8; node_size];
        buf[0] = NODE_KIND_INTERNAL;
        buf[2..4].copy_from_slice(&(self.pivots.len() as u16).to_le_bytes());
        buf[4..12].copy_from_slice(&self.first_child.to_le_bytes());
        let mut pos = INTERNAL_HEADER_LEN;
        for (pivot, child) in &self.pivots {
            buf[pos..pos + 2].copy_from_slice(&(pivot.len() as u16).to_le_bytes());
            pos += 2;
            buf[pos..pos + pivot.len()].copy_from_slice(pivot);
            pos += pivot.len();
            buf[pos..pos + 8].copy_from_slice(&child.to_le_bytes());
            pos += 8;
        }
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<InternalNode> {
        if buf.len() < INTERNAL_HEADER_LEN || buf[0] != NODE_KIND_INTERNAL {
            return Err(EngineError::CorruptNode);
        }
        let count = u16::from_le_bytes(buf[2..4].try_into().unwrap()) as usize;
        let first_child = u64::from_le_bytes(buf[4..12].try_into().unwrap());
        let mut pivots = Vec::with_capacity(count);
        let mut pos = INTERNAL_HEADER_LEN;
        for _ in 0..count {
            if pos + 2 > buf.len() {
                return Err(EngineError::CorruptNode);
            }
            let len = u16::from_le_bytes(buf[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            if pos + len + 8 > buf.len() {
                return Err(EngineError::CorruptNode);
            }
            let pivot = buf[pos..pos + len].to_vec();
            pos += len;
            let child = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
            pos += 8;
            pivots.push((pivot, child));
        }
        Ok(InternalNode { first_child, pivots })
    }

    /// Child to descend into for `key`.
    pub fn route(&self, key: &[u8]) -> u64 {
        let mut child = self.first_child;
        for (pivot, c) in &self.pivots {
            if key >= pivot.as_slice() {
                child = *c;
            } else {
                break;
            }
        }
        child
    }
}

/// Kind byte of the node slot starting at `buf[0]`.
pub fn node_kind(buf: &[u8]) -> u8 {
    buf.first().copied().unwrap_or(NODE_KIND_FREE)
}
