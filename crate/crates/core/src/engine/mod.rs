//! Single-node LSM key-value engine with KV separation.
//!
//! Writes append full records to the value log and index them by
//! `<key prefix, log pointer>` pairs. L0 is an in-memory sorted map;
//! deeper levels are on-device B+-trees bulk-built by compaction into
//! freshly allocated segments, never in place, so a committed level can be
//! shipped to backups while the engine keeps serving reads.

pub mod level;
pub mod log;
pub mod node;
pub mod record;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::device::{Device, DeviceError, DeviceOffset, Segment};
use level::{Level, LevelBuilder, LevelIter};
pub use level::LevelImages;
use log::{parse_record_sequence, SealedLogSegment, ValueLog};
use node::{key_prefix, KEY_PREFIX_LEN};
use record::ValueLogPointer;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid key length {0} (must be 1..=255)")]
    InvalidKey(usize),
    #[error("invalid value length {0} (max 64 KiB)")]
    InvalidValue(usize),
    #[error("record of {record} bytes exceeds segment size {segment}")]
    RecordTooLarge { record: usize, segment: usize },
    #[error("corrupt value-log record")]
    CorruptRecord,
    #[error("corrupt index node")]
    CorruptNode,
    #[error(transparent)]
    Device(#[from] DeviceError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Capacity ratio between consecutive levels; 2..=16.
    pub growth_factor: u64,
    /// L0 capacity in keys; a spill to L1 triggers when reached.
    pub l0_capacity_keys: usize,
    /// B+-tree node size; must divide the segment size.
    pub node_size: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            growth_factor: 4,
            l0_capacity_keys: 64 * 1024,
            node_size: 4096,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(2..=16).contains(&self.growth_factor) {
            return Err(format!("growth factor {} outside 2..=16", self.growth_factor));
        }
        if self.l0_capacity_keys == 0 {
            return Err("l0 capacity must be positive".into());
        }
        if self.node_size < 64 || !self.node_size.is_power_of_two() {
            return Err(format!("bad node size {}", self.node_size));
        }
        Ok(())
    }
}

/// Result of a committed compaction, carrying everything needed to ship the
/// new level to backups.
#[derive(Debug, Clone)]
pub struct CompactionJob {
    pub target_level: u32,
    pub leaf_segments: Vec<Segment>,
    pub internal_segments: Vec<Segment>,
    pub root: Option<DeviceOffset>,
    pub entries: u64,
    /// Sealed log segments fully covered by levels at job commit; backups
    /// persist this to bound the L0 replay on promotion.
    pub covered_log_segments: u64,
    /// Segment bytes of the freshly built level; present for jobs coming
    /// out of a compaction so shipping needs no device re-read. Absent
    /// for synthetic jobs describing already-resident levels.
    pub images: Option<LevelImages>,
}

pub struct PutOutcome {
    pub ptr: ValueLogPointer,
    /// Encoded record bytes for the replication write.
    pub record: Vec<u8>,
    /// Previous tail segment, if appending this record sealed it.
    pub sealed: Option<SealedLogSegment>,
    /// L0 reached capacity; the caller decides when to run the spill so it
    /// can order log flushes and index shipping around it.
    pub l0_full: bool,
}

#[derive(Debug, Default, Clone)]
pub struct EngineCounters {
    pub compactions: u64,
    pub l0_spills: u64,
    pub l0_insertions: u64,
    pub replayed_bytes: u64,
}

pub struct Engine {
    cfg: EngineConfig,
    device: Arc<Device>,
    log: ValueLog,
    l0: BTreeMap<Vec<u8>, u64>,
    /// levels[i] is level i; index 0 is a placeholder (L0 is the map above).
    levels: Vec<Level>,
    covered_log_segments: u64,
    counters: EngineCounters,
}

impl Engine {
    pub fn new(device: Arc<Device>, cfg: EngineConfig) -> Engine {
        cfg.validate().expect("invalid engine config");
        assert_eq!(
            device.segment_size() as usize % cfg.node_size,
            0,
            "segment size must be a multiple of node size"
        );
        Engine {
            log: ValueLog::new(device.clone()),
            device,
            cfg,
            l0: BTreeMap::new(),
            levels: vec![Level::empty(0)],
            covered_log_segments: 0,
            counters: EngineCounters::default(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Arc<Device> {
        &self.device
    }

    pub fn log(&self) -> &ValueLog {
        &self.log
    }

    pub fn counters(&self) -> &EngineCounters {
        &self.counters
    }

    pub fn l0_len(&self) -> usize {
        self.l0.len()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn covered_log_segments(&self) -> u64 {
        self.covered_log_segments
    }

    /// Entry capacity of level `i`: l0_capacity * f^i.
    pub fn level_capacity(&self, i: usize) -> u64 {
        (self.cfg.l0_capacity_keys as u64).saturating_mul(self.cfg.growth_factor.saturating_pow(i as u32))
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Result<PutOutcome> {
        self.write(key, value, false)
    }

    pub fn delete(&mut self, key: &[u8]) -> Result<PutOutcome> {
        self.write(key, b"", true)
    }

    fn write(&mut self, key: &[u8], value: &[u8], tombstone: bool) -> Result<PutOutcome> {
        let out = self.log.append(key, value, tombstone)?;
        self.l0.insert(key.to_vec(), out.ptr.to_raw());
        self.counters.l0_insertions += 1;
        Ok(PutOutcome {
            ptr: out.ptr,
            record: out.record,
            sealed: out.sealed,
            l0_full: self.l0.len() >= self.cfg.l0_capacity_keys,
        })
    }

    /// Convenience for single-node use: put and run any due compactions.
    pub fn put_local(&mut self, key: &[u8], value: &[u8]) -> Result<()> {
        if self.put(key, value)?.l0_full {
            self.flush_l0_and_cascade()?;
        }
        Ok(())
    }

    pub fn delete_local(&mut self, key: &[u8]) -> Result<()> {
        if self.delete(key)?.l0_full {
            self.flush_l0_and_cascade()?;
        }
        Ok(())
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        if let Some(raw) = self.l0.get(key) {
            let ptr = ValueLogPointer::from_raw(*raw);
            if ptr.tombstone {
                return Ok(None);
            }
            return Ok(Some(self.log.read_record(ptr.offset)?.value));
        }
        for level in self.levels.iter().skip(1) {
            if level.is_empty() {
                continue;
            }
            let candidates = level.lookup_candidates(&self.device, self.cfg.node_size, key)?;
            for ptr in candidates {
                let rec = self.log.read_record(ptr.offset)?;
                if rec.key == key {
                    return Ok(if rec.tombstone { None } else { Some(rec.value) });
                }
            }
        }
        Ok(None)
    }

    /// Up to `count` live pairs with key >= `start_key`, ascending, merged
    /// across L0 and all levels with newest-wins semantics.
    pub fn scan(&self, start_key: &[u8], count: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let mut cursors: Vec<MergeCursor> = Vec::new();
        cursors.push(MergeCursor::from_l0(
            self.l0
                .range(start_key.to_vec()..)
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        ));
        let mut iters = Vec::new();
        for level in self.levels.iter().skip(1) {
            if !level.is_empty() {
                iters.push(level.iter_from(&self.device, self.cfg.node_size, &self.log, start_key)?);
            }
        }
        for it in iters {
            cursors.push(MergeCursor::from_level(it));
        }
        for c in &mut cursors {
            c.fill(&self.log)?;
        }
        let mut out = Vec::new();
        while out.len() < count {
            // Smallest current key across cursors; lowest index (newest) wins ties.
            let mut best: Option<usize> = None;
            for i in 0..cursors.len() {
                if cursors[i].current.is_none() {
                    continue;
                }
                match best {
                    None => best = Some(i),
                    Some(b) => {
                        let ord = {
                            let (left, right) = split_two(&mut cursors, i, b);
                            cmp_items(left.current.as_mut().unwrap(), right.current.as_mut().unwrap(), &self.log)?
                        };
                        if ord == std::cmp::Ordering::Less {
                            best = Some(i);
                        }
                    }
                }
            }
            let best = match best {
                Some(b) => b,
                None => break,
            };
            let winner_key = resolve_key(cursors[best].current.as_mut().unwrap(), &self.log)?.to_vec();
            let winner_raw = cursors[best].current.as_ref().unwrap().raw;
            // Drop this key from every cursor.
            for c in cursors.iter_mut() {
                if let Some(item) = c.current.as_mut() {
                    if item.prefix == key_prefix(&winner_key) && resolve_key(item, &self.log)? == winner_key.as_slice() {
                        c.advance(&self.log)?;
                    }
                }
            }
            let ptr = ValueLogPointer::from_raw(winner_raw);
            if !ptr.tombstone {
                let rec = self.log.read_record(ptr.offset)?;
                out.push((winner_key, rec.value));
            }
        }
        Ok(out)
    }

    /// Seal the in-progress log tail so its segment can be flushed to
    /// backups before an index that references it ships.
    pub fn seal_log(&mut self) -> Result<Option<SealedLogSegment>> {
        self.log.seal_tail()
    }

    /// Spill L0 to L1 and run any cascading level compactions. Returns the
    /// committed jobs in execution order.
    pub fn flush_l0_and_cascade(&mut self) -> Result<Vec<CompactionJob>> {
        self.counters.l0_spills += 1;
        let mut jobs = vec![self.compact(0)?];
        let mut i = 1;
        while i < self.levels.len() {
            if self.levels[i].entries > self.level_capacity(i) {
                jobs.push(self.compact(i)?);
            }
            i += 1;
        }
        Ok(jobs)
    }

    fn ensure_level(&mut self, n: usize) {
        while self.levels.len() <= n {
            let number = self.levels.len() as u32;
            self.levels.push(Level::empty(number));
        }
    }

    /// Merge level `i` (or L0 when i == 0) with level i+1 into a new level
    /// built in fresh segments; the old levels' segments are freed at commit.
    pub fn compact(&mut self, i: usize) -> Result<CompactionJob> {
        self.ensure_level(i + 1);
        // Tombstones are purged when nothing deeper holds data.
        let purge = self.levels.iter().skip(i + 2).all(|l| l.is_empty());
        let mut builder = LevelBuilder::new(self.device.clone(), (i + 1) as u32, self.cfg.node_size);
        {
            let l0_snapshot: Vec<(Vec<u8>, u64)>;
            let mut newer = if i == 0 {
                l0_snapshot = self.l0.iter().map(|(k, v)| (k.clone(), *v)).collect();
                MergeCursor::from_l0(l0_snapshot)
            } else {
                MergeCursor::from_level(self.levels[i].iter(&self.device, self.cfg.node_size))
            };
            let mut older = MergeCursor::from_level(self.levels[i + 1].iter(&self.device, self.cfg.node_size));
            newer.fill(&self.log)?;
            older.fill(&self.log)?;
            loop {
                let take_newer = match (&newer.current, &older.current) {
                    (None, None) => break,
                    (Some(_), None) => true,
                    (None, Some(_)) => false,
                    (Some(_), Some(_)) => {
                        let ord = cmp_items(
                            newer.current.as_mut().unwrap(),
                            older.current.as_mut().unwrap(),
                            &self.log,
                        )?;
                        match ord {
                            std::cmp::Ordering::Less => true,
                            std::cmp::Ordering::Greater => false,
                            std::cmp::Ordering::Equal => {
                                // Duplicate: newer wins, older record is dropped.
                                older.advance(&self.log)?;
                                true
                            }
                        }
                    }
                };
                let cursor = if take_newer { &mut newer } else { &mut older };
                let item = cursor.current.as_ref().unwrap();
                let ptr = ValueLogPointer::from_raw(item.raw);
                if !(purge && ptr.tombstone) {
                    builder.add_with_prefix(item.prefix, item.raw, item.key.as_deref(), &self.log)?;
                }
                cursor.advance(&self.log)?;
            }
        }
        let (new_level, images) = builder.finish_with_images()?;
        let job = CompactionJob {
            target_level: (i + 1) as u32,
            leaf_segments: new_level.leaf_segments.clone(),
            internal_segments: new_level.internal_segments.clone(),
            root: new_level.root,
            entries: new_level.entries,
            covered_log_segments: if i == 0 {
                self.log.sealed_count()
            } else {
                self.covered_log_segments
            },
            images: Some(images),
        };
        let old_target = std::mem::replace(&mut self.levels[i + 1], new_level);
        old_target.free(&self.device)?;
        if i == 0 {
            self.l0.clear();
            self.covered_log_segments = self.log.sealed_count();
        } else {
            let old_src = std::mem::replace(&mut self.levels[i], Level::empty(i as u32));
            old_src.free(&self.device)?;
        }
        self.counters.compactions += 1;
        Ok(job)
    }

    // ---- backup-side entry points ----

    /// Install a rewritten level received from the primary, replacing the
    /// old one atomically and freeing its segments.
    pub fn install_level(&mut self, level: Level, covered_log_segments: u64) -> Result<()> {
        let n = level.number as usize;
        self.ensure_level(n);
        let old = std::mem::replace(&mut self.levels[n], level);
        old.free(&self.device)?;
        // An installed L1 replaces what L0 covered on the primary.
        self.covered_log_segments = covered_log_segments;
        Ok(())
    }

    /// Append a flushed primary log segment verbatim.
    pub fn apply_raw_log_segment(&mut self, bytes: &[u8]) -> Result<Segment> {
        self.log.apply_raw_segment(bytes)
    }

    /// Insert an externally derived <key, pointer> into L0 (Build Index
    /// backups). Returns true when L0 reached capacity.
    pub fn ingest_entry(&mut self, key: Vec<u8>, ptr: ValueLogPointer) -> bool {
        self.l0.insert(key, ptr.to_raw());
        self.counters.l0_insertions += 1;
        self.l0.len() >= self.cfg.l0_capacity_keys
    }

    /// Promotion: rebuild L0 from log segments not covered by levels.
    pub fn replay_uncovered_log_segments(&mut self) -> Result<()> {
        let start = self.covered_log_segments as usize;
        for idx in start..self.log.segments().len() {
            let seg_start = self.log.segments()[idx].start.0;
            let bytes = self.log.segment_bytes(idx)?;
            let (records, len) = parse_record_sequence(&bytes);
            for (off, rec) in records {
                let ptr = ValueLogPointer::new(DeviceOffset(seg_start + off), rec.tombstone);
                self.l0.insert(rec.key, ptr.to_raw());
                self.counters.l0_insertions += 1;
            }
            self.counters.replayed_bytes += len as u64;
        }
        Ok(())
    }

    /// Promotion: adopt the replication buffer contents as the new log tail
    /// and index its records in L0. Returns the number of records recovered.
    pub fn adopt_replicated_tail(&mut self, buf: &[u8]) -> Result<usize> {
        let (records, len) = parse_record_sequence(buf);
        let seg = self.log.adopt_tail(&buf[..len])?;
        let n = records.len();
        for (off, rec) in records {
            let ptr = ValueLogPointer::new(DeviceOffset(seg.start.0 + off), rec.tombstone);
            self.l0.insert(rec.key, ptr.to_raw());
            self.counters.l0_insertions += 1;
        }
        self.counters.replayed_bytes += len as u64;
        Ok(n)
    }

    /// Free all device storage held by this engine (a region being torn
    /// down, e.g. a backup replaced during recovery).
    pub fn release_storage(mut self) -> Result<()> {
        self.log.release()?;
        for level in &self.levels {
            level.free(&self.device)?;
        }
        Ok(())
    }
}

// ---- merge machinery shared by compaction and scan ----

struct MergeItem {
    prefix: [u8; KEY_PREFIX_LEN],
    raw: u64,
    key: Option<Vec<u8>>,
}

enum CursorSource<'a> {
    Mem(std::vec::IntoIter<(Vec<u8>, u64)>),
    Level(LevelIter<'a>),
}

struct MergeCursor<'a> {
    source: CursorSource<'a>,
    current: Option<MergeItem>,
}

impl<'a> MergeCursor<'a> {
    fn from_l0(entries: Vec<(Vec<u8>, u64)>) -> MergeCursor<'a> {
        MergeCursor {
            source: CursorSource::Mem(entries.into_iter()),
            current: None,
        }
    }

    fn from_level(iter: LevelIter<'a>) -> MergeCursor<'a> {
        MergeCursor {
            source: CursorSource::Level(iter),
            current: None,
        }
    }

    fn fill(&mut self, _log: &ValueLog) -> Result<()> {
        self.current = match &mut self.source {
            CursorSource::Mem(it) => it.next().map(|(k, raw)| MergeItem {
                prefix: key_prefix(&k),
                raw,
                key: Some(k),
            }),
            CursorSource::Level(it) => it.next_entry()?.map(|(prefix, raw)| MergeItem {
                prefix,
                raw,
                key: None,
            }),
        };
        Ok(())
    }

    fn advance(&mut self, log: &ValueLog) -> Result<()> {
        self.fill(log)
    }
}

fn resolve_key<'i>(item: &'i mut MergeItem, log: &ValueLog) -> Result<&'i [u8]> {
    if item.key.is_none() {
        let ptr = ValueLogPointer::from_raw(item.raw);
        item.key = Some(log.read_key(ptr.offset)?);
    }
    Ok(item.key.as_deref().unwrap())
}

/// Order two merge items: prefix comparison, with full keys read from the
/// log on prefix ties.
fn cmp_items(a: &mut MergeItem, b: &mut MergeItem, log: &ValueLog) -> Result<std::cmp::Ordering> {
    match a.prefix.cmp(&b.prefix) {
        std::cmp::Ordering::Equal => {
            let ka = resolve_key(a, log)?.to_vec();
            let kb = resolve_key(b, log)?;
            Ok(ka.as_slice().cmp(kb))
        }
        other => Ok(other),
    }
}

fn split_two<'s, 'a>(
    cursors: &'s mut [MergeCursor<'a>],
    i: usize,
    j: usize,
) -> (&'s mut MergeCursor<'a>, &'s mut MergeCursor<'a>) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = cursors.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = cursors.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Re-export for convenience.
pub use record::LogRecord as Record;
