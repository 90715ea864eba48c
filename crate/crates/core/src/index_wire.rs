//! Level shipping: serialize a compacted level on the primary, rewrite its
//! pointers on backups.
//!
//! A shipped level arrives as a stream of segment-sized payloads followed by
//! a manifest. Backups keep two translation maps keyed by segment start:
//! a long-lived log segment map (primary log segment -> local log segment)
//! and a per-transfer index map (primary index segment -> local index
//! segment). Rewriting a pointer is map lookup plus within-segment offset;
//! it never reads the device.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::device::{Device, DeviceError, DeviceOffset, Segment, SegmentKind};
use crate::engine::level::Level;
use crate::engine::node::{
    node_kind, InternalNode, LeafNode, NODE_KIND_FREE, NODE_KIND_INTERNAL, NODE_KIND_LEAF,
};
use crate::engine::record::ValueLogPointer;
use crate::engine::CompactionJob;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("no mapping for segment start {0:#x}")]
    MissingMapping(u64),
    #[error("transfer incomplete: expected {expected} segments, applied {applied}")]
    IncompleteTransfer { expected: u32, applied: u32 },
    #[error("transfer already finalized")]
    AlreadyFinalized,
    #[error("malformed wire payload")]
    Corrupt,
    #[error(transparent)]
    Device(#[from] DeviceError),
}

pub type Result<T> = std::result::Result<T, WireError>;

/// Primary value-log segment start -> local value-log segment start.
/// One per backup region; lives as long as the region.
#[derive(Debug, Default, Clone)]
pub struct LogSegmentMap {
    map: HashMap<u64, u64>,
}

impl LogSegmentMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, primary_start: DeviceOffset, local_start: DeviceOffset) {
        let prev = self.map.insert(primary_start.0, local_start.0);
        debug_assert!(prev.is_none(), "log segment mapped twice");
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn translate(&self, device: &Device, ptr: ValueLogPointer) -> Result<ValueLogPointer> {
        let seg = device.segment_start_of(ptr.offset);
        let local = self
            .map
            .get(&seg.0)
            .ok_or(WireError::MissingMapping(seg.0))?;
        Ok(ValueLogPointer::new(
            DeviceOffset(local + device.within_segment(ptr.offset)),
            ptr.tombstone,
        ))
    }
}

/// Primary index-segment start -> local index-segment start. Exists only for
/// the duration of one level transfer.
#[derive(Debug, Default)]
pub struct IndexMap {
    map: HashMap<u64, u64>,
}

impl IndexMap {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn insert(&mut self, primary_start: DeviceOffset, local_start: DeviceOffset) {
        let prev = self.map.insert(primary_start.0, local_start.0);
        debug_assert!(prev.is_none(), "index segment mapped twice");
    }

    pub fn translate(&self, device: &Device, ptr: DeviceOffset) -> Result<DeviceOffset> {
        let seg = device.segment_start_of(ptr);
        let local = self
            .map
            .get(&seg.0)
            .ok_or(WireError::MissingMapping(seg.0))?;
        Ok(DeviceOffset(local + device.within_segment(ptr)))
    }
}

pub const SEGMENT_KIND_LEAF: u8 = 1;
pub const SEGMENT_KIND_INTERNAL: u8 = 2;
pub const SEGMENT_WIRE_HEADER_LEN: usize = 16;

/// One level segment in flight:
/// `[kind:1][reserved:3][primary_start:8][seq:4][payload:segment_size]`, little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedSegment {
    pub kind: u8,
    pub primary_start: DeviceOffset,
    pub seq: u32,
    pub payload: Vec<u8>,
}

impl SerializedSegment {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SEGMENT_WIRE_HEADER_LEN + self.payload.len());
        out.push(self.kind);
        out.extend_from_slice(&[0u8; 3]);
        out.extend_from_slice(&self.primary_start.0.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<SerializedSegment> {
        if buf.len() < SEGMENT_WIRE_HEADER_LEN {
            return Err(WireError::Corrupt);
        }
        let kind = buf[0];
        if kind != SEGMENT_KIND_LEAF && kind != SEGMENT_KIND_INTERNAL {
            return Err(WireError::Corrupt);
        }
        Ok(SerializedSegment {
            kind,
            primary_start: DeviceOffset(u64::from_le_bytes(buf[4..12].try_into().unwrap())),
            seq: u32::from_le_bytes(buf[12..16].try_into().unwrap()),
            payload: buf[SEGMENT_WIRE_HEADER_LEN..].to_vec(),
        })
    }
}

pub const MANIFEST_WIRE_LEN: usize = 48;
const ROOT_NONE: u64 = u64::MAX;

/// Trailer of a level transfer:
/// `[region_id:4][level:4][segment_count:4][reserved:4][primary_root:8][entries:8][tombstones:8][covered_log_segments:8]`.
/// `primary_root` is all-ones when the level is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactionManifest {
    pub region_id: u32,
    pub level: u32,
    pub segment_count: u32,
    pub primary_root: Option<DeviceOffset>,
    pub entries: u64,
    pub tombstones: u64,
    /// Sealed log segments fully covered by levels at job commit; backups
    /// persist this to bound the L0 replay on promotion.
    pub covered_log_segments: u64,
}

impl CompactionManifest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MANIFEST_WIRE_LEN);
        out.extend_from_slice(&self.region_id.to_le_bytes());
        out.extend_from_slice(&self.level.to_le_bytes());
        out.extend_from_slice(&self.segment_count.to_le_bytes());
        out.extend_from_slice(&[0u8; 4]);
        out.extend_from_slice(&self.primary_root.map_or(ROOT_NONE, |r| r.0).to_le_bytes());
        out.extend_from_slice(&self.entries.to_le_bytes());
        out.extend_from_slice(&self.tombstones.to_le_bytes());
        out.extend_from_slice(&self.covered_log_segments.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<CompactionManifest> {
        if buf.len() != MANIFEST_WIRE_LEN {
            return Err(WireError::Corrupt);
        }
        let root = u64::from_le_bytes(buf[16..24].try_into().unwrap());
        Ok(CompactionManifest {
            region_id: u32::from_le_bytes(buf[0..4].try_into().unwrap()),
            level: u32::from_le_bytes(buf[4..8].try_into().unwrap()),
            segment_count: u32::from_le_bytes(buf[8..12].try_into().unwrap()),
            primary_root: if root == ROOT_NONE {
                None
            } else {
                Some(DeviceOffset(root))
            },
            entries: u64::from_le_bytes(buf[24..32].try_into().unwrap()),
            tombstones: u64::from_le_bytes(buf[32..40].try_into().unwrap()),
            covered_log_segments: u64::from_le_bytes(buf[40..48].try_into().unwrap()),
        })
    }
}

/// Primary side: read the committed level's segments and emit them in
/// dependency order (leaves first, internal segments in build order, which
/// places children before parents), then the manifest.
pub fn primary_serialize_level(
    device: &Device,
    job: &CompactionJob,
    region_id: u32,
    tombstones: u64,
) -> Result<(Vec<SerializedSegment>, CompactionManifest)> {
    let mut segments = Vec::with_capacity(job.leaf_segments.len() + job.internal_segments.len());
    let mut seq = 0u32;
    // Fresh compactions carry their segment bytes; only synthetic jobs
    // describing resident levels (resync) go back to the device.
    let mut push = |seg: &Segment, kind: u8, image: Option<&Vec<u8>>| -> Result<()> {
        let payload = match image {
            Some(bytes) => {
                debug_assert_eq!(bytes.len() as u64, seg.size);
                bytes.clone()
            }
            None => device.read_at(seg.start, seg.size)?,
        };
        segments.push(SerializedSegment {
            kind,
            primary_start: seg.start,
            seq,
            payload,
        });
        seq += 1;
        Ok(())
    };
    for (i, seg) in job.leaf_segments.iter().enumerate() {
        push(seg, SEGMENT_KIND_LEAF, job.images.as_ref().map(|im| &im.leaf[i]))?;
    }
    for (i, seg) in job.internal_segments.iter().enumerate() {
        push(seg, SEGMENT_KIND_INTERNAL, job.images.as_ref().map(|im| &im.internal[i]))?;
    }
    let manifest = CompactionManifest {
        region_id,
        level: job.target_level,
        segment_count: seq,
        primary_root: job.root,
        entries: job.entries,
        tombstones,
        covered_log_segments: job.covered_log_segments,
    };
    Ok((segments, manifest))
}

/// Backup side: accumulates rewritten segments for one in-flight level
/// transfer. All-or-nothing: `finalize` yields the installable level,
/// `abort` frees everything allocated so far.
pub struct BackupTransfer {
    device: Arc<Device>,
    node_size: usize,
    idx_map: IndexMap,
    leaf_segments: Vec<Segment>,
    internal_segments: Vec<Segment>,
    applied: u32,
    finalized: bool,
}

impl BackupTransfer {
    pub fn new(device: Arc<Device>, node_size: usize) -> BackupTransfer {
        BackupTransfer {
            device,
            node_size,
            idx_map: IndexMap::default(),
            leaf_segments: Vec::new(),
            internal_segments: Vec::new(),
            applied: 0,
            finalized: false,
        }
    }

    pub fn applied(&self) -> u32 {
        self.applied
    }

    pub fn index_map(&self) -> &IndexMap {
        &self.idx_map
    }

    /// Rewrite one received segment into a freshly allocated local segment.
    /// Leaf value pointers go through `log_map`; internal child pointers go
    /// through the transfer's index map, which already contains every
    /// segment shipped before this one.
    pub fn apply_segment(
        &mut self,
        seg: &SerializedSegment,
        log_map: &LogSegmentMap,
    ) -> Result<Segment> {
        if self.finalized {
            return Err(WireError::AlreadyFinalized);
        }
        let seg_size = self.device.segment_size() as usize;
        if seg.payload.len() != seg_size {
            return Err(WireError::Corrupt);
        }
        let (kind, list_is_leaf) = match seg.kind {
            SEGMENT_KIND_LEAF => (SegmentKind::IndexLeaf, true),
            SEGMENT_KIND_INTERNAL => (SegmentKind::IndexInternal, false),
            _ => return Err(WireError::Corrupt),
        };
        let local = self.device.allocate_segment(kind)?;
        // Mapped before the rewrite so intra-segment child pointers resolve.
        self.idx_map.insert(seg.primary_start, local.start);
        let rewrite = if list_is_leaf {
            self.rewrite_leaf_payload(&seg.payload, log_map)
        } else {
            self.rewrite_internal_payload(&seg.payload)
        };
        let rewritten = match rewrite {
            Ok(buf) => buf,
            Err(e) => {
                self.device.free_segment(&local)?;
                self.idx_map.map.remove(&seg.primary_start.0);
                return Err(e);
            }
        };
        self.device.write_at(local.start, &rewritten)?;
        if list_is_leaf {
            self.leaf_segments.push(local);
        } else {
            self.internal_segments.push(local);
        }
        self.applied += 1;
        Ok(local)
    }

    fn rewrite_leaf_payload(&self, payload: &[u8], log_map: &LogSegmentMap) -> Result<Vec<u8>> {
        let mut out = payload.to_vec();
        for pos in (0..out.len()).step_by(self.node_size) {
            let slot = &mut out[pos..pos + self.node_size];
            match node_kind(slot) {
                NODE_KIND_FREE => continue,
                NODE_KIND_LEAF => {}
                _ => return Err(WireError::Corrupt),
            }
            let mut leaf = LeafNode::decode(slot).map_err(|_| WireError::Corrupt)?;
            for (_, raw) in leaf.entries.iter_mut() {
                let ptr = ValueLogPointer::from_raw(*raw);
                *raw = log_map.translate(&self.device, ptr)?.to_raw();
            }
            slot.copy_from_slice(&leaf.encode(self.node_size));
        }
        Ok(out)
    }

    fn rewrite_internal_payload(&self, payload: &[u8]) -> Result<Vec<u8>> {
        let mut out = payload.to_vec();
        for pos in (0..out.len()).step_by(self.node_size) {
            let slot = &mut out[pos..pos + self.node_size];
            match node_kind(slot) {
                NODE_KIND_FREE => continue,
                NODE_KIND_INTERNAL => {}
                _ => return Err(WireError::Corrupt),
            }
            let mut node = InternalNode::decode(slot).map_err(|_| WireError::Corrupt)?;
            node.first_child = self
                .idx_map
                .translate(&self.device, DeviceOffset(node.first_child))?
                .0;
            for (_, child) in node.pivots.iter_mut() {
                *child = self.idx_map.translate(&self.device, DeviceOffset(*child))?.0;
            }
            slot.copy_from_slice(&node.encode(self.node_size));
        }
        Ok(out)
    }

    /// Assemble the installable level. Consumes the index map; the caller
    /// installs the level into its engine and frees the old one there.
    pub fn finalize(&mut self, man: &CompactionManifest) -> Result<Level> {
        if self.finalized {
            return Err(WireError::AlreadyFinalized);
        }
        if self.applied != man.segment_count {
            return Err(WireError::IncompleteTransfer {
                expected: man.segment_count,
                applied: self.applied,
            });
        }
        let root = match man.primary_root {
            Some(r) => Some(self.idx_map.translate(&self.device, r)?),
            None => None,
        };
        self.finalized = true;
        self.idx_map = IndexMap::default();
        Ok(Level {
            number: man.level,
            leaf_segments: std::mem::take(&mut self.leaf_segments),
            internal_segments: std::mem::take(&mut self.internal_segments),
            root,
            entries: man.entries,
            tombstones: man.tombstones,
        })
    }

    /// Discard a failed transfer, freeing every segment it allocated. The
    /// backup's old level stays untouched.
    pub fn abort(mut self) -> Result<()> {
        if self.finalized {
            return Ok(());
        }
        for seg in self.leaf_segments.drain(..).chain(self.internal_segments.drain(..)) {
            self.device.free_segment(&seg)?;
        }
        Ok(())
    }
}
