//! In-process backend: both endpoints live in one address space and a
//! remote write is a memcpy into the peer's registered buffer.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::{
    BufferHandle, BufferId, BufferRegistry, CompletionEvent, Connection, NetworkStats, Result,
    TransportError, FRAME_HEADER_LEN,
};

struct Endpoint {
    registry: BufferRegistry,
    stats: Arc<NetworkStats>,
    closed: AtomicBool,
}

pub struct InProcConn {
    local: Arc<Endpoint>,
    peer: Arc<Endpoint>,
    next_req: AtomicU64,
}

impl InProcConn {
    fn pair(
        client_stats: Arc<NetworkStats>,
        server_stats: Arc<NetworkStats>,
    ) -> (Arc<InProcConn>, Arc<InProcConn>) {
        let a = Arc::new(Endpoint {
            registry: BufferRegistry::new(),
            stats: client_stats,
            closed: AtomicBool::new(false),
        });
        let b = Arc::new(Endpoint {
            registry: BufferRegistry::new(),
            stats: server_stats,
            closed: AtomicBool::new(false),
        });
        (
            Arc::new(InProcConn {
                local: a.clone(),
                peer: b.clone(),
                next_req: AtomicU64::new(1),
            }),
            Arc::new(InProcConn {
                local: b,
                peer: a,
                next_req: AtomicU64::new(1),
            }),
        )
    }
}

impl Connection for InProcConn {
    fn register_buffer(&self, len: usize, tag: Option<u32>) -> Result<Arc<BufferHandle>> {
        if self.is_closed() {
            return Err(TransportError::ConnectionClosed);
        }
        Ok(self.local.registry.register(len, tag))
    }

    fn deregister_buffer(&self, id: BufferId) -> Result<()> {
        self.local.registry.deregister(id)
    }

    fn local_buffer(&self, id: BufferId) -> Result<Arc<BufferHandle>> {
        self.local
            .registry
            .get(id)
            .ok_or(TransportError::BufferNotRegistered(id))
    }

    fn peer_buffer_by_tag(&self, tag: u32, timeout: Duration) -> Result<(BufferId, u64)> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(found) = self.peer.registry.by_tag(tag) {
                return Ok(found);
            }
            if self.is_closed() {
                return Err(TransportError::ConnectionClosed);
            }
            if Instant::now() >= deadline {
                return Err(TransportError::Timeout);
            }
            std::thread::sleep(Duration::from_micros(50));
        }
    }

    fn remote_write(&self, remote_buf: BufferId, remote_off: u64, bytes: &[u8]) -> Result<CompletionEvent> {
        if self.is_closed() {
            return Err(TransportError::ConnectionClosed);
        }
        let buf = self
            .peer
            .registry
            .get(remote_buf)
            .ok_or(TransportError::BufferNotRegistered(remote_buf))?;
        buf.deposit(remote_off, bytes)?;
        let frame = (FRAME_HEADER_LEN + bytes.len()) as u64;
        self.local.stats.add_sent(frame);
        self.peer.stats.add_received(frame);
        Ok(CompletionEvent {
            request_id: self.next_req.fetch_add(1, Ordering::Relaxed),
        })
    }

    fn stats(&self) -> &Arc<NetworkStats> {
        &self.local.stats
    }

    fn close(&self) {
        self.local.closed.store(true, Ordering::Release);
    }

    fn is_closed(&self) -> bool {
        self.local.closed.load(Ordering::Acquire) || self.peer.closed.load(Ordering::Acquire)
    }
}

/// Address space for in-process listeners; one per simulated cluster.
#[derive(Default)]
pub struct InProcNetwork {
    listeners: Mutex<std::collections::HashMap<String, (Sender<Arc<InProcConn>>, Arc<NetworkStats>)>>,
}

pub struct InProcListener {
    rx: Receiver<Arc<InProcConn>>,
}

impl InProcNetwork {
    pub fn new() -> Arc<InProcNetwork> {
        Arc::new(InProcNetwork::default())
    }

    /// All connections accepted at `addr` account their traffic to `stats`.
    pub fn listen(&self, addr: &str, stats: Arc<NetworkStats>) -> InProcListener {
        let (tx, rx) = channel();
        self.listeners
            .lock()
            .unwrap()
            .insert(addr.to_string(), (tx, stats));
        InProcListener { rx }
    }

    pub fn connect(&self, addr: &str, stats: Arc<NetworkStats>) -> Result<Arc<dyn Connection>> {
        let listeners = self.listeners.lock().unwrap();
        let (tx, server_stats) = listeners
            .get(addr)
            .ok_or_else(|| TransportError::Unreachable(addr.to_string()))?;
        let (client, server) = InProcConn::pair(stats, server_stats.clone());
        tx.send(server)
            .map_err(|_| TransportError::Unreachable(addr.to_string()))?;
        Ok(client)
    }

    pub fn unlisten(&self, addr: &str) {
        self.listeners.lock().unwrap().remove(addr);
    }
}

impl InProcListener {
    pub fn accept(&self) -> Result<Arc<dyn Connection>> {
        let conn = self
            .rx
            .recv()
            .map_err(|_| TransportError::ConnectionClosed)?;
        Ok(conn)
    }

    pub fn try_accept(&self) -> Option<Arc<dyn Connection>> {
        self.rx.try_recv().ok().map(|c| c as Arc<dyn Connection>)
    }
}
