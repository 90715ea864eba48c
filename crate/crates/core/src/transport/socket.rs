//! Stream-socket backend: one frame per remote write on a TCP stream, with
//! a reader thread depositing frames into local registered buffers.
//!
//! Data frame: `[remote_buf_id:4][remote_off:8][len:4][payload]`,
//! little-endian. Control frames reuse the layout with the reserved buffer
//! id `0xFFFF_FFFF`; they announce and retract buffer registrations so the
//! sender can validate writes locally, keeping error semantics identical to
//! the in-process backend.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{
    BufferHandle, BufferId, BufferRegistry, CompletionEvent, Connection, NetworkStats, Result,
    TransportError, FRAME_HEADER_LEN,
};

const CTRL_BUF_ID: u32 = u32::MAX;
const CTRL_ANNOUNCE: u64 = 1;
const CTRL_RETRACT: u64 = 2;

#[derive(Default)]
struct PeerState {
    /// id -> (length, active)
    bufs: std::collections::HashMap<BufferId, (u64, bool)>,
    tags: std::collections::HashMap<u32, BufferId>,
}

pub struct SocketConn {
    writer: Mutex<TcpStream>,
    registry: Arc<BufferRegistry>,
    peer: Arc<(Mutex<PeerState>, Condvar)>,
    stats: Arc<NetworkStats>,
    closed: Arc<AtomicBool>,
    next_req: AtomicU64,
}

impl SocketConn {
    fn start(stream: TcpStream, stats: Arc<NetworkStats>) -> Result<Arc<SocketConn>> {
        stream.set_nodelay(true)?;
        let registry = Arc::new(BufferRegistry::new());
        let peer = Arc::new((Mutex::new(PeerState::default()), Condvar::new()));
        let closed = Arc::new(AtomicBool::new(false));
        let conn = Arc::new(SocketConn {
            writer: Mutex::new(stream.try_clone()?),
            registry: registry.clone(),
            peer: peer.clone(),
            stats: stats.clone(),
            closed: closed.clone(),
            next_req: AtomicU64::new(1),
        });
        std::thread::Builder::new()
            .name("transport-reader".into())
            .spawn(move || reader_loop(stream, registry, peer, stats, closed))
            .expect("spawn reader");
        Ok(conn)
    }

    fn send_frame(&self, buf_id: u32, off: u64, payload: &[u8]) -> Result<()> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        header[0..4].copy_from_slice(&buf_id.to_le_bytes());
        header[4..12].copy_from_slice(&off.to_le_bytes());
        header[12..16].copy_from_slice(&(payload.len() as u32).to_le_bytes());
        let mut w = self.writer.lock().unwrap();
        let res = w
            .write_all(&header)
            .and_then(|_| w.write_all(payload))
            .and_then(|_| w.flush());
        if res.is_err() {
            self.closed.store(true, Ordering::Release);
            return Err(TransportError::ConnectionClosed);
        }
        Ok(())
    }
}

fn reader_loop(
    mut stream: TcpStream,
    registry: Arc<BufferRegistry>,
    peer: Arc<(Mutex<PeerState>, Condvar)>,
    stats: Arc<NetworkStats>,
    closed: Arc<AtomicBool>,
) {
    let mut header = [0u8; FRAME_HEADER_LEN];
    loop {
        if stream.read_exact(&mut header).is_err() {
            break;
        }
        let buf_id = u32::from_le_bytes(header[0..4].try_into().unwrap());
        let off = u64::from_le_bytes(header[4..12].try_into().unwrap());
        let len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; len];
        if stream.read_exact(&mut payload).is_err() {
            break;
        }
        stats.add_received((FRAME_HEADER_LEN + len) as u64);
        if buf_id == CTRL_BUF_ID {
            let (lock, cvar) = &*peer;
            let mut state = lock.lock().unwrap();
            match off {
                CTRL_ANNOUNCE => {
                    let id = u32::from_le_bytes(payload[0..4].try_into().unwrap());
                    let blen = u64::from_le_bytes(payload[4..12].try_into().unwrap());
                    state.bufs.insert(id, (blen, true));
                    if payload[12] == 1 {
                        let tag = u32::from_le_bytes(payload[13..17].try_into().unwrap());
                        state.tags.insert(tag, id);
                    }
                }
                CTRL_RETRACT => {
                    let id = u32::from_le_bytes(payload[0..4].try_into().unwrap());
                    if let Some(entry) = state.bufs.get_mut(&id) {
                        entry.1 = false;
                    }
                }
                _ => log::warn!("unknown control op {}", off),
            }
            cvar.notify_all();
            continue;
        }
        match registry.get(buf_id) {
            Some(buf) => {
                if let Err(e) = buf.deposit(off, &payload) {
                    log::warn!("dropping frame for buffer {}: {}", buf_id, e);
                }
            }
            None => log::warn!("frame for unknown buffer {}", buf_id),
        }
    }
    closed.store(true, Ordering::Release);
    peer.1.notify_all();
}

impl Connection for SocketConn {
    fn register_buffer(&self, len: usize, tag: Option<u32>) -> Result<Arc<BufferHandle>> {
        if self.is_closed() {
            return Err(TransportError::ConnectionClosed);
        }
        let handle = self.registry.register(len, tag);
        let mut body = Vec::with_capacity(17);
        body.extend_from_slice(&handle.id().to_le_bytes());
        body.extend_from_slice(&(len as u64).to_le_bytes());
        match tag {
            Some(t) => {
                body.push(1);
                body.extend_from_slice(&t.to_le_bytes());
            }
            None => body.extend_from_slice(&[0u8; 5]),
        }
        self.send_frame(CTRL_BUF_ID, CTRL_ANNOUNCE, &body)?;
        Ok(handle)
    }

    fn deregister_buffer(&self, id: BufferId) -> Result<()> {
        self.registry.deregister(id)?;
        self.send_frame(CTRL_BUF_ID, CTRL_RETRACT, &id.to_le_bytes())
    }

    fn local_buffer(&self, id: BufferId) -> Result<Arc<BufferHandle>> {
        self.registry
            .get(id)
            .ok_or(TransportError::BufferNotRegistered(id))
    }

    fn peer_buffer_by_tag(&self, tag: u32, timeout: Duration) -> Result<(BufferId, u64)> {
        let deadline = Instant::now() + timeout;
        let (lock, cvar) = &*self.peer;
        let mut state = lock.lock().unwrap();
        loop {
            if let Some(id) = state.tags.get(&tag) {
                if let Some((len, true)) = state.bufs.get(id) {
                    return Ok((*id, *len));
                }
            }
            if self.is_closed() {
                return Err(TransportError::ConnectionClosed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Timeout);
            }
            let (s, _) = cvar.wait_timeout(state, deadline - now).unwrap();
            state = s;
        }
    }

    fn remote_write(&self, remote_buf: BufferId, remote_off: u64, bytes: &[u8]) -> Result<CompletionEvent> {
        if self.is_closed() {
            return Err(TransportError::ConnectionClosed);
        }
        {
            // Validate against announced peer metadata so errors match the
            // in-process backend synchronously.
            let state = self.peer.0.lock().unwrap();
            match state.bufs.get(&remote_buf) {
                Some((len, active)) => {
                    if !active {
                        return Err(TransportError::BufferNotRegistered(remote_buf));
                    }
                    if remote_off + bytes.len() as u64 > *len {
                        return Err(TransportError::OutOfBounds {
                            off: remote_off,
                            len: bytes.len(),
                            buf_len: *len,
                        });
                    }
                }
                None => return Err(TransportError::BufferNotRegistered(remote_buf)),
            }
        }
        self.send_frame(remote_buf, remote_off, bytes)?;
        self.stats.add_sent((FRAME_HEADER_LEN + bytes.len()) as u64);
        Ok(CompletionEvent {
            request_id: self.next_req.fetch_add(1, Ordering::Relaxed),
        })
    }

    fn stats(&self) -> &Arc<NetworkStats> {
        &self.stats
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Release);
        if let Ok(w) = self.writer.lock() {
            let _ = w.shutdown(std::net::Shutdown::Both);
        }
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }
}

pub struct SocketListener {
    listener: TcpListener,
    stats: Arc<NetworkStats>,
}

impl SocketListener {
    pub fn bind<A: ToSocketAddrs>(addr: A, stats: Arc<NetworkStats>) -> Result<SocketListener> {
        Ok(SocketListener {
            listener: TcpListener::bind(addr)?,
            stats,
        })
    }

    pub fn local_addr(&self) -> Result<std::net::SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn accept(&self) -> Result<Arc<dyn Connection>> {
        let (stream, _) = self.listener.accept()?;
        Ok(SocketConn::start(stream, self.stats.clone())? as Arc<dyn Connection>)
    }
}

pub fn socket_connect<A: ToSocketAddrs>(addr: A, stats: Arc<NetworkStats>) -> Result<Arc<dyn Connection>> {
    let stream = TcpStream::connect(addr).map_err(|e| {
        if e.kind() == std::io::ErrorKind::ConnectionRefused {
            TransportError::Unreachable("connection refused".into())
        } else {
            TransportError::Io(e)
        }
    })?;
    Ok(SocketConn::start(stream, stats)? as Arc<dyn Connection>)
}
