//! Append-only value log over device segments.
//!
//! The in-progress tail segment is buffered in memory and written to the
//! device as one segment-sized write when it seals, either because a record
//! does not fit or because the caller forces a seal before shipping an index.
//! Backups grow their log exclusively through raw segment applies, which
//! reproduce the primary's segments byte for byte.

use std::sync::Arc;

use crate::device::{Device, DeviceOffset, Segment, SegmentKind};
use crate::engine::record::{
    decode_header, decode_record, encode_record, LogRecord, ValueLogPointer, RECORD_HEADER_LEN,
};
use crate::engine::{EngineError, Result};

/// A log segment that has been written out to the device.
#[derive(Debug, Clone)]
pub struct SealedLogSegment {
    pub segment: Segment,
    /// Position of this segment in log order (0-based).
    pub index: u64,
    /// Bytes occupied by records; the rest of the segment is zero padding.
    pub fill: usize,
}

struct Tail {
    segment: Segment,
    buf: Vec<u8>,
    fill: usize,
}

pub struct ValueLog {
    device: Arc<Device>,
    segments: Vec<Segment>,
    tail: Option<Tail>,
}

pub struct AppendOutcome {
    pub ptr: ValueLogPointer,
    /// Encoded record bytes, reused by replication for the remote write.
    pub record: Vec<u8>,
    /// Set when the previous tail segment sealed to make room.
    pub sealed: Option<SealedLogSegment>,
}

impl ValueLog {
    pub fn new(device: Arc<Device>) -> ValueLog {
        ValueLog {
            device,
            segments: Vec::new(),
            tail: None,
        }
    }

    pub fn device(&self) -> &Arc<Device> {
        &self.device
    }

    /// Sealed segments, in log order.
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn sealed_count(&self) -> u64 {
        self.segments.len() as u64
    }

    pub fn tail_segment_start(&self) -> Option<DeviceOffset> {
        self.tail.as_ref().map(|t| t.segment.start)
    }

    pub fn tail_fill(&self) -> usize {
        self.tail.as_ref().map_or(0, |t| t.fill)
    }

    pub fn tail_bytes(&self) -> Option<&[u8]> {
        self.tail.as_ref().map(|t| &t.buf[..t.fill])
    }

    pub fn append(&mut self, key: &[u8], value: &[u8], tombstone: bool) -> Result<AppendOutcome> {
        let record = encode_record(key, value, tombstone)?;
        let seg_size = self.device.segment_size() as usize;
        if record.len() > seg_size {
            return Err(EngineError::RecordTooLarge {
                record: record.len(),
                segment: seg_size,
            });
        }
        if self.tail.is_none() {
            self.alloc_tail()?;
        }
        let mut sealed = None;
        if self.tail.as_ref().unwrap().fill + record.len() > seg_size {
            sealed = self.seal_tail()?;
            self.alloc_tail()?;
        }
        let tail = self.tail.as_mut().unwrap();
        let off = tail.fill;
        tail.buf[off..off + record.len()].copy_from_slice(&record);
        tail.fill += record.len();
        Ok(AppendOutcome {
            ptr: ValueLogPointer::new(DeviceOffset(tail.segment.start.0 + off as u64), tombstone),
            record,
            sealed,
        })
    }

    fn alloc_tail(&mut self) -> Result<()> {
        let segment = self.device.allocate_segment(SegmentKind::ValueLog)?;
        self.tail = Some(Tail {
            segment,
            buf: vec![0u8; self.device.segment_size() as usize],
            fill: 0,
        });
        Ok(())
    }

    /// Write the tail segment to the device and retire it. Returns `None` if
    /// the tail is empty (nothing to persist).
    pub fn seal_tail(&mut self) -> Result<Option<SealedLogSegment>> {
        match &self.tail {
            Some(t) if t.fill > 0 => {}
            _ => return Ok(None),
        }
        let tail = self.tail.take().unwrap();
        self.device.write_at(tail.segment.start, &tail.buf)?;
        let index = self.segments.len() as u64;
        self.segments.push(tail.segment);
        Ok(Some(SealedLogSegment {
            segment: tail.segment,
            index,
            fill: tail.fill,
        }))
    }

    /// Backup path: install `bytes` verbatim as the next log segment.
    pub fn apply_raw_segment(&mut self, bytes: &[u8]) -> Result<Segment> {
        let seg_size = self.device.segment_size() as usize;
        assert!(bytes.len() <= seg_size);
        let segment = self.device.allocate_segment(SegmentKind::ValueLog)?;
        if bytes.len() == seg_size {
            self.device.write_at(segment.start, bytes)?;
        } else {
            let mut padded = vec![0u8; seg_size];
            padded[..bytes.len()].copy_from_slice(bytes);
            self.device.write_at(segment.start, &padded)?;
        }
        self.segments.push(segment);
        Ok(segment)
    }

    fn tail_slice(&self, off: DeviceOffset) -> Option<&[u8]> {
        let tail = self.tail.as_ref()?;
        let start = tail.segment.start.0;
        if off.0 >= start && off.0 < start + tail.fill as u64 {
            Some(&tail.buf[(off.0 - start) as usize..tail.fill])
        } else {
            None
        }
    }

    /// Decode the record at `off`. Reads from the in-memory tail when the
    /// offset falls inside it, otherwise from the device.
    pub fn read_record(&self, off: DeviceOffset) -> Result<LogRecord> {
        if let Some(slice) = self.tail_slice(off) {
            let (rec, _) = decode_record(slice)?;
            return Ok(rec);
        }
        let header = self.device.read_at(off, RECORD_HEADER_LEN as u64)?;
        let (key_len, value_len, _) = decode_header(&header)?;
        let rest = self
            .device
            .read_at(DeviceOffset(off.0 + RECORD_HEADER_LEN as u64), (key_len + value_len) as u64)?;
        let mut buf = header;
        buf.extend_from_slice(&rest);
        let (rec, _) = decode_record(&buf)?;
        Ok(rec)
    }

    /// Read only the key of the record at `off` (used for prefix tie-breaks
    /// and pivot derivation during compaction).
    pub fn read_key(&self, off: DeviceOffset) -> Result<Vec<u8>> {
        if let Some(slice) = self.tail_slice(off) {
            let (key_len, _, _) = decode_header(slice)?;
            return Ok(slice[RECORD_HEADER_LEN..RECORD_HEADER_LEN + key_len].to_vec());
        }
        let header = self.device.read_at(off, RECORD_HEADER_LEN as u64)?;
        let (key_len, _, _) = decode_header(&header)?;
        let key = self
            .device
            .read_at(DeviceOffset(off.0 + RECORD_HEADER_LEN as u64), key_len as u64)?;
        Ok(key)
    }

    /// Read the raw bytes of sealed segment `index` from the device.
    pub fn segment_bytes(&self, index: usize) -> Result<Vec<u8>> {
        let seg = self.segments[index];
        Ok(self.device.read_at(seg.start, seg.size)?)
    }

    /// Install an in-memory tail whose contents were recovered from a
    /// replication buffer. `bytes` must be a valid record sequence prefix.
    pub fn adopt_tail(&mut self, bytes: &[u8]) -> Result<Segment> {
        assert!(self.tail.is_none(), "adopt_tail with a live tail");
        let seg_size = self.device.segment_size() as usize;
        assert!(bytes.len() <= seg_size);
        let segment = self.device.allocate_segment(SegmentKind::ValueLog)?;
        let mut buf = vec![0u8; seg_size];
        buf[..bytes.len()].copy_from_slice(bytes);
        self.tail = Some(Tail {
            segment,
            buf,
            fill: bytes.len(),
        });
        Ok(segment)
    }

    /// Free every log segment (a region being torn down).
    pub fn release(&mut self) -> Result<()> {
        for seg in self.segments.drain(..) {
            self.device.free_segment(&seg)?;
        }
        if let Some(t) = self.tail.take() {
            self.device.free_segment(&t.segment)?;
        }
        Ok(())
    }
}

/// Parse the record sequence at the start of `buf`, returning
/// `(within_offset, record)` pairs and the total valid byte length.
/// Parsing stops at zero padding or the end of the buffer.
pub fn parse_record_sequence(buf: &[u8]) -> (Vec<(u64, LogRecord)>, usize) {
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos + RECORD_HEADER_LEN <= buf.len() {
        match decode_record(&buf[pos..]) {
            Ok((rec, used)) => {
                out.push((pos as u64, rec));
                pos += used;
            }
            Err(_) => break,
        }
    }
    (out, pos)
}
