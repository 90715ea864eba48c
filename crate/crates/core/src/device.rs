//! Segment-allocated block device with exact I/O accounting.
//!
//! All on-device structures (value log, level indexes) are lists of fixed-size,
//! aligned segments. Two backends share the same interface: an in-memory byte
//! array for unit tests and a single flat file with explicit flush for
//! persistence. Every read and write increments a byte counter, which the
//! benchmark layer uses to compute I/O amplification.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("device is full")]
    DeviceFull,
    #[error("segment at {0:#x} is already free")]
    DoubleFree(u64),
    #[error("segment at {0:#x} is not a segment start or was never allocated")]
    NotAllocated(u64),
    #[error("range [{off:#x}, {off:#x}+{len}) exceeds device capacity {capacity:#x}")]
    OutOfBounds { off: u64, len: u64, capacity: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DeviceError>;

/// Byte offset into the device address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DeviceOffset(pub u64);

impl DeviceOffset {
    pub fn as_u64(self) -> u64 {
        self.0
    }
}

/// What a segment currently holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    ValueLog,
    IndexLeaf,
    IndexInternal,
}

/// An allocated, aligned run of `size` bytes starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: DeviceOffset,
    pub size: u64,
    pub kind: SegmentKind,
}

/// Monotonic byte counters for device traffic.
#[derive(Debug, Default)]
pub struct DeviceStats {
    bytes_read: AtomicU64,
    bytes_written: AtomicU64,
}

impl DeviceStats {
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.bytes_read() + self.bytes_written()
    }
}

enum Backend {
    Mem(Vec<u8>),
    File(File),
}

struct Inner {
    backend: Backend,
    /// Free segment starts, ordered so allocation is lowest-address-first.
    free: BTreeSet<u64>,
    allocated: HashMap<u64, SegmentKind>,
}

pub struct Device {
    capacity: u64,
    segment_size: u64,
    inner: Mutex<Inner>,
    stats: DeviceStats,
}

impl Device {
    pub fn new_in_memory(capacity: u64, segment_size: u64) -> Device {
        Self::validate(capacity, segment_size);
        Device {
            capacity,
            segment_size,
            inner: Mutex::new(Inner {
                backend: Backend::Mem(vec![0u8; capacity as usize]),
                free: (0..capacity / segment_size).map(|i| i * segment_size).collect(),
                allocated: HashMap::new(),
            }),
            stats: DeviceStats::default(),
        }
    }

    pub fn open_file<P: AsRef<Path>>(path: P, capacity: u64, segment_size: u64) -> Result<Device> {
        Self::validate(capacity, segment_size);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .open(path)?;
        file.set_len(capacity)?;
        Ok(Device {
            capacity,
            segment_size,
            inner: Mutex::new(Inner {
                backend: Backend::File(file),
                free: (0..capacity / segment_size).map(|i| i * segment_size).collect(),
                allocated: HashMap::new(),
            }),
            stats: DeviceStats::default(),
        })
    }

    fn validate(capacity: u64, segment_size: u64) {
        assert!(segment_size.is_power_of_two(), "segment size must be a power of two");
        assert!(capacity >= segment_size, "capacity must hold at least one segment");
        assert_eq!(capacity % segment_size, 0, "capacity must be a multiple of segment size");
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn segment_size(&self) -> u64 {
        self.segment_size
    }

    pub fn stats(&self) -> &DeviceStats {
        &self.stats
    }

    /// Start offset of the segment containing `off`.
    pub fn segment_start_of(&self, off: DeviceOffset) -> DeviceOffset {
        DeviceOffset(off.0 - off.0 % self.segment_size)
    }

    /// Byte offset of `off` within its segment.
    pub fn within_segment(&self, off: DeviceOffset) -> u64 {
        off.0 % self.segment_size
    }

    pub fn allocate_segment(&self, kind: SegmentKind) -> Result<Segment> {
        let mut inner = self.inner.lock().unwrap();
        let start = *inner.free.iter().next().ok_or(DeviceError::DeviceFull)?;
        inner.free.remove(&start);
        inner.allocated.insert(start, kind);
        Ok(Segment {
            start: DeviceOffset(start),
            size: self.segment_size,
            kind,
        })
    }

    pub fn free_segment(&self, seg: &Segment) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let start = seg.start.0;
        if inner.free.contains(&start) {
            return Err(DeviceError::DoubleFree(start));
        }
        if inner.allocated.remove(&start).is_none() {
            return Err(DeviceError::NotAllocated(start));
        }
        inner.free.insert(start);
        Ok(())
    }

    pub fn free_segment_count(&self) -> usize {
        self.inner.lock().unwrap().free.len()
    }

    pub fn allocated_segment_count(&self) -> usize {
        self.inner.lock().unwrap().allocated.len()
    }

    fn check_bounds(&self, off: DeviceOffset, len: u64) -> Result<()> {
        if off.0.checked_add(len).map_or(true, |end| end > self.capacity) {
            return Err(DeviceError::OutOfBounds {
                off: off.0,
                len,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    pub fn write_at(&self, off: DeviceOffset, bytes: &[u8]) -> Result<()> {
        self.check_bounds(off, bytes.len() as u64)?;
        let mut inner = self.inner.lock().unwrap();
        match &mut inner.backend {
            Backend::Mem(buf) => {
                buf[off.0 as usize..off.0 as usize + bytes.len()].copy_from_slice(bytes);
            }
            Backend::File(f) => {
                f.seek(SeekFrom::Start(off.0))?;
                f.write_all(bytes)?;
            }
        }
        self.stats.bytes_written.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    pub fn read_at(&self, off: DeviceOffset, len: u64) -> Result<Vec<u8>> {
        self.check_bounds(off, len)?;
        let mut out = vec![0u8; len as usize];
        let mut inner = self.inner.lock().unwrap();
        match &mut inner.backend {
            Backend::Mem(buf) => {
                out.copy_from_slice(&buf[off.0 as usize..off.0 as usize + len as usize]);
            }
            Backend::File(f) => {
                f.seek(SeekFrom::Start(off.0))?;
                f.read_exact(&mut out)?;
            }
        }
        self.stats.bytes_read.fetch_add(len, Ordering::Relaxed);
        Ok(out)
    }

    /// Persist pending writes. A no-op for the in-memory backend.
    pub fn flush(&self) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if let Backend::File(f) = &mut inner.backend {
            f.sync_data()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEG: u64 = 0x200000; // 2 MiB, the production default

    fn mem_dev(segments: u64) -> Device {
        Device::new_in_memory(segments * SEG, SEG)
    }

    #[test]
    fn first_allocation_starts_at_zero() {
        let dev = mem_dev(4);
        let a = dev.allocate_segment(SegmentKind::ValueLog).unwrap();
        assert_eq!(a.start, DeviceOffset(0));
        let b = dev.allocate_segment(SegmentKind::ValueLog).unwrap();
        assert_eq!(b.start, DeviceOffset(0x200000));
    }

    #[test]
    fn exhaustion_yields_device_full() {
        let dev = mem_dev(2);
        dev.allocate_segment(SegmentKind::ValueLog).unwrap();
        dev.allocate_segment(SegmentKind::ValueLog).unwrap();
        assert!(matches!(
            dev.allocate_segment(SegmentKind::ValueLog),
            Err(DeviceError::DeviceFull)
        ));
    }

    #[test]
    fn free_then_allocate_reuses_lowest_address() {
        let dev = mem_dev(4);
        let a = dev.allocate_segment(SegmentKind::ValueLog).unwrap();
        let _b = dev.allocate_segment(SegmentKind::ValueLog).unwrap();
        dev.free_segment(&a).unwrap();
        let c = dev.allocate_segment(SegmentKind::IndexLeaf).unwrap();
        assert_eq!(c.start, a.start);
    }

    #[test]
    fn double_free_detected() {
        let dev = mem_dev(2);
        let a = dev.allocate_segment(SegmentKind::ValueLog).unwrap();
        dev.free_segment(&a).unwrap();
        assert!(matches!(dev.free_segment(&a), Err(DeviceError::DoubleFree(0))));
    }

    #[test]
    fn free_whole_level_then_reallocate() {
        let dev = mem_dev(8);
        let level: Vec<_> = (0..5)
            .map(|_| dev.allocate_segment(SegmentKind::IndexLeaf).unwrap())
            .collect();
        let before = dev.free_segment_count();
        for seg in &level {
            dev.free_segment(seg).unwrap();
        }
        assert_eq!(dev.free_segment_count(), before + 5);
        for _ in 0..5 {
            dev.allocate_segment(SegmentKind::IndexLeaf).unwrap();
        }
        assert_eq!(dev.free_segment_count(), before);
    }

    #[test]
    fn read_write_round_trip_updates_stats() {
        let dev = mem_dev(2);
        let data = vec![7u8; 100];
        dev.write_at(DeviceOffset(16), &data).unwrap();
        let back = dev.read_at(DeviceOffset(16), 100).unwrap();
        assert_eq!(back, data);
        assert_eq!(dev.stats().bytes_written(), 100);
        assert_eq!(dev.stats().bytes_read(), 100);
    }

    #[test]
    fn read_beyond_capacity() {
        let dev = mem_dev(1);
        assert!(matches!(
            dev.read_at(DeviceOffset(SEG - 10), 20),
            Err(DeviceError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn interleaved_segment_writes_match_shadow() {
        let dev = mem_dev(2);
        let mut shadow = vec![0u8; (2 * SEG) as usize];
        let writes = [(0u64, b"alpha".as_slice()), (SEG, b"beta"), (100, b"gamma"), (SEG + 50, b"delta")];
        for (off, bytes) in writes {
            dev.write_at(DeviceOffset(off), bytes).unwrap();
            shadow[off as usize..off as usize + bytes.len()].copy_from_slice(bytes);
        }
        for (off, bytes) in writes {
            let got = dev.read_at(DeviceOffset(off), bytes.len() as u64).unwrap();
            assert_eq!(got, shadow[off as usize..off as usize + bytes.len()]);
        }
    }

    #[test]
    fn segment_decomposition() {
        let dev = mem_dev(8);
        // 0x00643210 with 2 MiB segments: 0x600000 + 0x43210
        let off = DeviceOffset(0x0064_3210);
        assert_eq!(dev.segment_start_of(off), DeviceOffset(0x60_0000));
        assert_eq!(dev.within_segment(off), 0x4_3210);
        assert_eq!(dev.segment_start_of(DeviceOffset(0x200000)), DeviceOffset(0x200000));
        assert_eq!(dev.within_segment(DeviceOffset(0x200000)), 0);
        assert_eq!(dev.segment_start_of(DeviceOffset(0)), DeviceOffset(0));
    }

    #[test]
    fn decomposition_agrees_with_div_mod_oracle() {
        let dev = mem_dev(8);
        for off in [0u64, 1, 127, SEG - 1, SEG, SEG + 1, 3 * SEG + 12345, 7 * SEG + SEG - 1] {
            let q = off / SEG;
            let r = off % SEG;
            assert_eq!(dev.segment_start_of(DeviceOffset(off)).0, q * SEG);
            assert_eq!(dev.within_segment(DeviceOffset(off)), r);
            assert_eq!(
                dev.segment_start_of(DeviceOffset(off)).0 + dev.within_segment(DeviceOffset(off)),
                off
            );
        }
    }

    #[test]
    fn file_backend_persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.img");
        {
            let dev = Device::open_file(&path, 4 * 65536, 65536).unwrap();
            dev.write_at(DeviceOffset(65536), b"persisted").unwrap();
            dev.flush().unwrap();
        }
        let dev = Device::open_file(&path, 4 * 65536, 65536).unwrap();
        assert_eq!(dev.read_at(DeviceOffset(65536), 9).unwrap(), b"persisted");
    }
}
