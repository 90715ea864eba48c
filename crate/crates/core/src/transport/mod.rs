//! Emulated one-sided-write fabric.
//!
//! A connection carries remote writes that deposit bytes directly into a
//! peer's registered buffer. The receiving side is never notified: it
//! observes new bytes only by polling its buffer memory. Completion means
//! the bytes were handed to the reliable channel (in-process: the memory
//! copy finished), which is the sender-visible point an acknowledgment can
//! hang off.
//!
//! Two backends with identical semantics: in-process (shared memory) and
//! stream sockets (one frame per write on a TCP stream, applied to local
//! buffers by a reader thread).

pub mod inproc;
pub mod socket;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("write of {len} bytes at offset {off} exceeds buffer of {buf_len} bytes")]
    OutOfBounds { off: u64, len: usize, buf_len: u64 },
    #[error("connection closed")]
    ConnectionClosed,
    #[error("no listener at {0}")]
    Unreachable(String),
    #[error("buffer {0} not registered")]
    BufferNotRegistered(u32),
    #[error("timed out waiting for peer")]
    Timeout,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TransportError>;

pub type BufferId = u32;

/// Delivered to the issuer exactly once per successful write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionEvent {
    pub request_id: u64,
}

/// Per-direction traffic counters. Every frame's total on-wire bytes are
/// accounted here; network amplification in the benchmark reads these.
#[derive(Debug, Default)]
pub struct NetworkStats {
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
}

impl NetworkStats {
    pub fn new() -> Arc<NetworkStats> {
        Arc::new(NetworkStats::default())
    }

    pub fn add_sent(&self, n: u64) {
        self.bytes_sent.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_received(&self, n: u64) {
        self.bytes_received.fetch_add(n, Ordering::Relaxed);
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent.load(Ordering::Relaxed)
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.bytes_sent() + self.bytes_received()
    }
}

/// Frame overhead per remote write: [remote_buf_id:4][remote_off:8][len:4].
pub const FRAME_HEADER_LEN: usize = 16;

/// A locally registered buffer: the peer writes into it, the owner polls it.
pub struct BufferHandle {
    id: BufferId,
    mem: Mutex<Vec<u8>>,
    active: AtomicBool,
    /// Would count receive-side upcalls; remote writes never notify the
    /// owner, so this stays zero by construction and tests assert it.
    owner_notifications: AtomicU64,
}

impl BufferHandle {
    fn new(id: BufferId, len: usize) -> Arc<BufferHandle> {
        Arc::new(BufferHandle {
            id,
            mem: Mutex::new(vec![0u8; len]),
            active: AtomicBool::new(true),
            owner_notifications: AtomicU64::new(0),
        })
    }

    pub fn id(&self) -> BufferId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.mem.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn owner_notifications(&self) -> u64 {
        self.owner_notifications.load(Ordering::Relaxed)
    }

    /// Polling read by the owner.
    pub fn read(&self, off: usize, len: usize) -> Vec<u8> {
        let mem = self.mem.lock().unwrap();
        mem[off..off + len].to_vec()
    }

    pub fn read_u8(&self, off: usize) -> u8 {
        self.mem.lock().unwrap()[off]
    }

    /// Owner-side write (e.g. zeroing consumed rendezvous points).
    pub fn write_local(&self, off: usize, bytes: &[u8]) {
        let mut mem = self.mem.lock().unwrap();
        mem[off..off + bytes.len()].copy_from_slice(bytes);
    }

    /// Deposit from the wire. Applied atomically under the buffer lock, so
    /// per-connection issue order is preserved by the single reader.
    fn deposit(&self, off: u64, bytes: &[u8]) -> Result<()> {
        if !self.active.load(Ordering::Acquire) {
            return Err(TransportError::BufferNotRegistered(self.id));
        }
        let mut mem = self.mem.lock().unwrap();
        let buf_len = mem.len() as u64;
        if off + bytes.len() as u64 > buf_len {
            return Err(TransportError::OutOfBounds {
                off,
                len: bytes.len(),
                buf_len,
            });
        }
        mem[off as usize..off as usize + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    fn deactivate(&self) {
        self.active.store(false, Ordering::Release);
    }
}

/// One endpoint of a reliable, ordered connection.
pub trait Connection: Send + Sync {
    /// Register a buffer the peer can write into. A tag lets the peer
    /// discover the buffer id without out-of-band exchange.
    fn register_buffer(&self, len: usize, tag: Option<u32>) -> Result<Arc<BufferHandle>>;

    /// Invalidate a buffer; subsequent writes to it fail.
    fn deregister_buffer(&self, id: BufferId) -> Result<()>;

    /// Look up a local buffer previously registered on this connection.
    fn local_buffer(&self, id: BufferId) -> Result<Arc<BufferHandle>>;

    /// Resolve a peer buffer by tag, waiting up to `timeout` for the peer to
    /// register it. Returns (buffer id, buffer length).
    fn peer_buffer_by_tag(&self, tag: u32, timeout: std::time::Duration) -> Result<(BufferId, u64)>;

    /// One-sided write into the peer's buffer. Returns when the bytes are
    /// handed to the reliable channel; no peer code runs.
    fn remote_write(&self, remote_buf: BufferId, remote_off: u64, bytes: &[u8]) -> Result<CompletionEvent>;

    fn stats(&self) -> &Arc<NetworkStats>;

    fn close(&self);

    fn is_closed(&self) -> bool;
}

/// Registry shared by both backends: local buffers plus tag directory.
pub(crate) struct BufferRegistry {
    next_id: AtomicU64,
    bufs: Mutex<std::collections::HashMap<BufferId, Arc<BufferHandle>>>,
    tags: Mutex<std::collections::HashMap<u32, BufferId>>,
}

impl BufferRegistry {
    pub(crate) fn new() -> BufferRegistry {
        BufferRegistry {
            next_id: AtomicU64::new(1),
            bufs: Mutex::new(Default::default()),
            tags: Mutex::new(Default::default()),
        }
    }

    pub(crate) fn register(&self, len: usize, tag: Option<u32>) -> Arc<BufferHandle> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) as BufferId;
        let handle = BufferHandle::new(id, len);
        self.bufs.lock().unwrap().insert(id, handle.clone());
        if let Some(t) = tag {
            self.tags.lock().unwrap().insert(t, id);
        }
        handle
    }

    pub(crate) fn get(&self, id: BufferId) -> Option<Arc<BufferHandle>> {
        self.bufs.lock().unwrap().get(&id).cloned()
    }

    pub(crate) fn by_tag(&self, tag: u32) -> Option<(BufferId, u64)> {
        let id = *self.tags.lock().unwrap().get(&tag)?;
        let buf = self.get(id)?;
        Some((id, buf.len() as u64))
    }

    pub(crate) fn deregister(&self, id: BufferId) -> Result<()> {
        match self.bufs.lock().unwrap().get(&id) {
            Some(buf) => {
                buf.deactivate();
                Ok(())
            }
            None => Err(TransportError::BufferNotRegistered(id)),
        }
    }
}
