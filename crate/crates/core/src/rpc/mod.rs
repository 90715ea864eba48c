//! Client-server messaging built exclusively on one-sided remote writes.
//!
//! Each side owns a circular buffer the peer writes messages into. Message
//! sizes are quantized to 128-byte message segments, so the receiver only
//! ever polls a small set of possible rendezvous points: the last header
//! byte (the receive field) at each segment boundary plus 31. A message is
//! complete only when both the receive field and the trailing tail marker
//! hold the magic byte; the sender emits header, payload, padding and tail
//! as a single remote write.
//!
//! When a client lacks contiguous space at its write cursor it sends a
//! reset-rendezvous message and continues from offset zero; filling the
//! buffer exactly to the end wraps implicitly.

pub mod client;
pub mod server;

use thiserror::Error;

use crate::transport::TransportError;

pub const MESSAGE_SEGMENT: usize = 128;
pub const HEADER_LEN: usize = 32;
pub const TAIL_LEN: usize = 1;
pub const MAGIC: u8 = 0xC5;
/// Receive field offset inside a message: header length minus its 1-byte
/// receive field. Rendezvous points sit at segment boundaries plus this.
pub const RECEIVE_FIELD_OFFSET: usize = HEADER_LEN - 1;

pub const DEFAULT_CLIENT_BUFFER: usize = 256 * 1024;
pub const MIN_CLIENT_BUFFER: usize = 16 * 1024;
pub const MAX_CLIENT_BUFFER: usize = 256 * 1024;

/// Operation codes carried in the message header.
pub mod op {
    pub const PUT: u8 = 1;
    pub const GET: u8 = 2;
    pub const DELETE: u8 = 3;
    pub const SCAN: u8 = 4;
    pub const FLUSH_LOG: u8 = 5;
    pub const INDEX_SEGMENT: u8 = 6;
    pub const INDEX_FINALIZE: u8 = 7;
    pub const RESET_RENDEZVOUS: u8 = 8;
    pub const OPEN_REGION: u8 = 9;
    pub const FETCH_CONTINUATION: u8 = 10;
    pub const GET_REGION_MAP: u8 = 11;
    pub const OPEN_PRIMARY: u8 = 12;
    pub const ADD_BACKUP: u8 = 13;
    pub const PROMOTE_REGION: u8 = 14;
    pub const SET_REGION_MAP: u8 = 15;
    pub const REMOVE_BACKUP: u8 = 16;
    // Coordination service over the wire (standalone coordinator).
    pub const COORD_CREATE_SESSION: u8 = 32;
    pub const COORD_HEARTBEAT: u8 = 33;
    pub const COORD_CLOSE_SESSION: u8 = 34;
    pub const COORD_CREATE: u8 = 35;
    pub const COORD_DELETE: u8 = 36;
    pub const COORD_GET: u8 = 37;
    pub const COORD_SET: u8 = 38;
    pub const COORD_CHILDREN: u8 = 39;
    pub const COORD_EXPIRE: u8 = 40;
    pub const REPLY: u8 = 128;
}

pub const FLAG_CONTINUATION: u8 = 0x1;
pub const FLAG_ERROR: u8 = 0x2;

#[derive(Debug, Error)]
pub enum RpcError {
    #[error("request timed out")]
    Timeout,
    #[error("message of {0} bytes exceeds the request buffer")]
    BufferFull(usize),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, RpcError>;

/// Fixed 32-byte header:
/// `[payload_len:4][op:1][flags:1][reserved:2][reply_offset:8][reply_len:4][req_id:8][pad:3][receive_field:1]`,
/// little-endian. The receive field is written last in wire order and holds
/// the magic byte; it is the polling trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub payload_len: u32,
    pub op: u8,
    pub flags: u8,
    pub reply_offset: u64,
    pub reply_len: u32,
    pub req_id: u64,
}

impl MessageHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.payload_len.to_le_bytes());
        out[4] = self.op;
        out[5] = self.flags;
        out[8..16].copy_from_slice(&self.reply_offset.to_le_bytes());
        out[16..20].copy_from_slice(&self.reply_len.to_le_bytes());
        out[20..28].copy_from_slice(&self.req_id.to_le_bytes());
        out[RECEIVE_FIELD_OFFSET] = MAGIC;
        out
    }

    pub fn decode(buf: &[u8]) -> Result<MessageHeader> {
        if buf.len() < HEADER_LEN {
            return Err(RpcError::Protocol("short header".into()));
        }
        if buf[RECEIVE_FIELD_OFFSET] != MAGIC {
            return Err(RpcError::Protocol("missing receive field magic".into()));
        }
        Ok(MessageHeader {
            payload_len: u32::from_le_bytes(buf[0..4].try_into().unwrap()),
            op: buf[4],
            flags: buf[5],
            reply_offset: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
            reply_len: u32::from_le_bytes(buf[16..20].try_into().unwrap()),
            req_id: u64::from_le_bytes(buf[20..28].try_into().unwrap()),
        })
    }
}

/// On-wire footprint of a message with `payload_len` payload bytes:
/// header + payload + tail, rounded up to the message segment size.
pub fn message_footprint(payload_len: usize) -> usize {
    let raw = HEADER_LEN + payload_len + TAIL_LEN;
    raw.div_ceil(MESSAGE_SEGMENT) * MESSAGE_SEGMENT
}

/// Compose a complete on-wire message (header, payload, zero padding, tail
/// marker) ready for a single remote write.
pub fn compose_message(header: &MessageHeader, payload: &[u8]) -> Vec<u8> {
    debug_assert_eq!(header.payload_len as usize, payload.len());
    let len = message_footprint(payload.len());
    let mut out = vec![0u8; len];
    out[..HEADER_LEN].copy_from_slice(&header.encode());
    out[HEADER_LEN..HEADER_LEN + payload.len()].copy_from_slice(payload);
    out[len - 1] = MAGIC;
    out
}

/// Largest payload that fits a reply window of `reply_len` bytes.
pub fn max_reply_payload(reply_len: usize) -> usize {
    reply_len - HEADER_LEN - TAIL_LEN
}

// ---- task scheduling policy ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerView {
    pub queue_len: usize,
    pub sleeping: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Enqueue on an already running worker.
    Run(usize),
    /// Enqueue on a sleeping worker and wake it.
    Wake(usize),
}

impl Assignment {
    pub fn worker(&self) -> usize {
        match self {
            Assignment::Run(i) | Assignment::Wake(i) => *i,
        }
    }
}

/// Pure assignment policy, separated from the worker pool so traces can be
/// checked deterministically: prefer the current worker while its queue is
/// under the threshold, then any running worker under the threshold, then
/// wake a sleeper, and only when every worker is busy pile onto the least
/// loaded one.
#[derive(Debug, Clone, Copy)]
pub struct SchedulerPolicy {
    pub task_threshold: usize,
}

impl Default for SchedulerPolicy {
    fn default() -> Self {
        SchedulerPolicy { task_threshold: 4 }
    }
}

impl SchedulerPolicy {
    pub fn decide(&self, current: usize, workers: &[WorkerView]) -> Assignment {
        assert!(!workers.is_empty());
        let cur = &workers[current];
        if !cur.sleeping && cur.queue_len < self.task_threshold {
            return Assignment::Run(current);
        }
        if let Some(i) = workers
            .iter()
            .position(|w| !w.sleeping && w.queue_len < self.task_threshold)
        {
            return Assignment::Run(i);
        }
        if let Some(i) = workers.iter().position(|w| w.sleeping) {
            return Assignment::Wake(i);
        }
        let least = workers
            .iter()
            .enumerate()
            .min_by_key(|(_, w)| w.queue_len)
            .map(|(i, _)| i)
            .unwrap();
        Assignment::Run(least)
    }
}

/// Buffer discovery tags, fixed per connection role.
pub const TAG_REQUEST_BUFFER: u32 = 0x5251; // server-side circular buffer
pub const TAG_REPLY_BUFFER: u32 = 0x5250; // client-side reply buffer

#[cfg(test)]
mod tests {
    use super::client::RpcClient;
    use super::server::{ConnCtx, ConnPoller, Handler, RpcConfig, RpcServer, WorkerPool};
    use super::*;
    use crate::transport::inproc::InProcNetwork;
    use crate::transport::{Connection, NetworkStats};
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    #[test]
    fn footprint_follows_ceiling_arithmetic() {
        // Oracle: ceil((header + payload + tail) / 128) * 128.
        for payload in [0usize, 1, 95, 96, 100, 500, 1000, 4096] {
            let want = (HEADER_LEN + payload + TAIL_LEN).div_ceil(128) * 128;
            assert_eq!(message_footprint(payload), want, "payload {}", payload);
            assert_eq!(message_footprint(payload) % MESSAGE_SEGMENT, 0);
        }
        assert_eq!(message_footprint(0), 128);
        assert_eq!(message_footprint(95), 128);
        assert_eq!(message_footprint(96), 256);
        assert_eq!(message_footprint(500), 640);
    }

    #[test]
    fn header_round_trip_and_receive_field_position() {
        let h = MessageHeader {
            payload_len: 1234,
            op: op::SCAN,
            flags: FLAG_CONTINUATION,
            reply_offset: 0xABCD,
            reply_len: 4096,
            req_id: 42,
        };
        let enc = h.encode();
        assert_eq!(enc.len(), HEADER_LEN);
        assert_eq!(enc[HEADER_LEN - 1], MAGIC, "receive field must be the last header byte");
        assert_eq!(MessageHeader::decode(&enc).unwrap(), h);
        let mut bad = enc;
        bad[HEADER_LEN - 1] = 0;
        assert!(MessageHeader::decode(&bad).is_err());
    }

    #[test]
    fn composed_message_carries_tail_marker() {
        let h = MessageHeader {
            payload_len: 5,
            op: op::PUT,
            flags: 0,
            reply_offset: 0,
            reply_len: 128,
            req_id: 1,
        };
        let msg = compose_message(&h, b"hello");
        assert_eq!(msg.len(), 128);
        assert_eq!(msg[HEADER_LEN..HEADER_LEN + 5], *b"hello");
        assert_eq!(*msg.last().unwrap(), MAGIC);
        // Padding is zeroed.
        assert!(msg[HEADER_LEN + 5..127].iter().all(|b| *b == 0));
    }

    fn loopback_poller(buf_len: usize) -> (Arc<dyn Connection>, ConnPoller) {
        let net = InProcNetwork::new();
        let listener = net.listen("srv", NetworkStats::new());
        let client = net.connect("srv", NetworkStats::new()).unwrap();
        let server = listener.accept().unwrap();
        let req_buf = server.register_buffer(buf_len, Some(TAG_REQUEST_BUFFER)).unwrap();
        (client, ConnPoller::new(req_buf))
    }

    fn raw_send(client: &Arc<dyn Connection>, at: u64, opcode: u8, payload: &[u8], req_id: u64) {
        let h = MessageHeader {
            payload_len: payload.len() as u32,
            op: opcode,
            flags: 0,
            reply_offset: 0,
            reply_len: 128,
            req_id,
        };
        let (id, _) = client
            .peer_buffer_by_tag(TAG_REQUEST_BUFFER, Duration::from_secs(5))
            .unwrap();
        client.remote_write(id, at, &compose_message(&h, payload)).unwrap();
    }

    #[test]
    fn empty_buffer_polls_none() {
        let (_client, mut poller) = loopback_poller(1024);
        assert!(poller.poll_once().unwrap().is_none());
        assert_eq!(poller.rendezvous(), 0);
    }

    #[test]
    fn header_without_tail_produces_no_task() {
        let (client, mut poller) = loopback_poller(1024);
        // Two-phase write: header first, tail later.
        let h = MessageHeader {
            payload_len: 200,
            op: op::PUT,
            flags: 0,
            reply_offset: 0,
            reply_len: 128,
            req_id: 9,
        };
        let full = compose_message(&h, &vec![7u8; 200]);
        let (id, _) = client
            .peer_buffer_by_tag(TAG_REQUEST_BUFFER, Duration::from_secs(5))
            .unwrap();
        client.remote_write(id, 0, &full[..HEADER_LEN]).unwrap();
        assert!(poller.poll_once().unwrap().is_none(), "no task before the tail arrives");
        client.remote_write(id, HEADER_LEN as u64, &full[HEADER_LEN..]).unwrap();
        let task = poller.poll_once().unwrap().expect("tail arrived");
        assert_eq!(task.header.req_id, 9);
        assert_eq!(task.payload, vec![7u8; 200]);
    }

    #[test]
    fn back_to_back_messages_in_order_and_zeroed() {
        let (client, mut poller) = loopback_poller(2048);
        raw_send(&client, 0, op::PUT, b"first", 1);
        raw_send(&client, 128, op::PUT, &vec![1u8; 300], 2);
        let t1 = poller.poll_once().unwrap().unwrap();
        assert_eq!(t1.header.req_id, 1);
        assert_eq!(poller.rendezvous(), 128);
        let t2 = poller.poll_once().unwrap().unwrap();
        assert_eq!(t2.header.req_id, 2);
        assert_eq!(poller.rendezvous(), 128 + 384);
        assert!(poller.poll_once().unwrap().is_none());
        // Every rendezvous point in the consumed footprints reads non-magic.
        for seg in (0..(128 + 384)).step_by(MESSAGE_SEGMENT) {
            assert_ne!(
                poller.buffer().read_u8(seg + RECEIVE_FIELD_OFFSET),
                MAGIC,
                "stale magic at {}",
                seg
            );
        }
    }

    #[test]
    fn reset_rendezvous_restarts_at_zero() {
        let (client, mut poller) = loopback_poller(1024);
        // Consume most of the buffer, then reset from offset 768.
        raw_send(&client, 0, op::PUT, &vec![2u8; 700], 1); // 768 bytes
        assert_eq!(poller.poll_once().unwrap().unwrap().header.req_id, 1);
        assert_eq!(poller.rendezvous(), 768);
        raw_send(&client, 768, op::RESET_RENDEZVOUS, &[], 0);
        assert!(poller.poll_once().unwrap().is_none(), "reset is not a task");
        assert_eq!(poller.rendezvous(), 0);
        raw_send(&client, 0, op::GET, b"k", 2);
        assert_eq!(poller.poll_once().unwrap().unwrap().header.req_id, 2);
    }

    #[test]
    fn exact_fill_wraps_implicitly() {
        let (client, mut poller) = loopback_poller(512);
        raw_send(&client, 0, op::PUT, &vec![3u8; 400], 1); // 512 bytes, fills exactly
        assert_eq!(poller.poll_once().unwrap().unwrap().header.req_id, 1);
        assert_eq!(poller.rendezvous(), 0, "implicit wrap, no reset message needed");
        raw_send(&client, 0, op::PUT, b"next", 2);
        assert_eq!(poller.poll_once().unwrap().unwrap().header.req_id, 2);
    }

    struct Echo;
    impl Handler for Echo {
        fn handle(&self, _ctx: &ConnCtx, opcode: u8, payload: &[u8]) -> std::result::Result<Vec<u8>, String> {
            match opcode {
                op::GET if payload == b"missing" => Err("not found".into()),
                // Reply with `n` bytes when asked: payload = [n:4].
                op::SCAN => {
                    let n = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
                    Ok((0..n).map(|i| (i % 251) as u8).collect())
                }
                _ => Ok(payload.to_vec()),
            }
        }
    }

    fn echo_pair(cfg: RpcConfig) -> (RpcServer, RpcClient) {
        let net = InProcNetwork::new();
        let listener = net.listen("srv", NetworkStats::new());
        let client_conn = net.connect("srv", NetworkStats::new()).unwrap();
        let server = RpcServer::start(Arc::new(Echo), cfg);
        server.add_connection(listener.accept().unwrap()).unwrap();
        let client = RpcClient::connect_with_buffer(client_conn, 16 * 1024).unwrap();
        (server, client)
    }

    #[test]
    fn round_trip_echo() {
        let (server, mut client) = echo_pair(RpcConfig::default());
        let reply = client.call(op::GET, b"k").unwrap();
        assert_eq!(reply.payload, b"k");
        let reply = client.call(op::PUT, &vec![9u8; 3000]).unwrap();
        assert_eq!(reply.payload, vec![9u8; 3000]);
        server.shutdown();
    }

    #[test]
    fn remote_error_surfaces() {
        let (server, mut client) = echo_pair(RpcConfig::default());
        let err = client.call(op::GET, b"missing").unwrap_err();
        assert!(matches!(err, RpcError::Remote(ref m) if m == "not found"), "{err}");
        server.shutdown();
    }

    #[test]
    fn oversized_reply_reassembled_via_continuation() {
        let (server, mut client) = echo_pair(RpcConfig::default());
        // 10 KiB reply through a 512 B window forces many continuations.
        let want: Vec<u8> = (0..10_000).map(|i| (i % 251) as u8).collect();
        let reply = client
            .call_with_reply_window(op::SCAN, &(10_000u32).to_le_bytes(), 512)
            .unwrap();
        assert_eq!(reply.payload, want);
        server.shutdown();
    }

    #[test]
    fn random_sizes_with_wraps_and_resets_are_exactly_once_in_order() {
        use rand::prelude::*;
        let (server, mut client) = echo_pair(RpcConfig::default());
        let mut rng = StdRng::seed_from_u64(1234);
        for seq in 0..400u64 {
            // Payload sizes span several segments so the 16 KiB request
            // buffer wraps and resets repeatedly.
            let n = rng.gen_range(0..3000usize);
            let mut payload = seq.to_le_bytes().to_vec();
            payload.extend((0..n).map(|_| rng.gen::<u8>()));
            let window = *[512usize, 1024, 4096, 16 * 1024].choose(&mut rng).unwrap();
            let reply = client
                .call_with_reply_window(op::PUT, &payload, window)
                .unwrap();
            assert_eq!(reply.payload, payload, "reply mismatch at seq {}", seq);
        }
        server.shutdown();
    }

    // ---- scheduler ----

    fn run(len: usize) -> WorkerView {
        WorkerView { queue_len: len, sleeping: false }
    }

    fn asleep() -> WorkerView {
        WorkerView { queue_len: 0, sleeping: true }
    }

    #[test]
    fn policy_prefers_current_worker_under_threshold() {
        let p = SchedulerPolicy { task_threshold: 4 };
        assert_eq!(p.decide(1, &[run(0), run(3), asleep()]), Assignment::Run(1));
    }

    #[test]
    fn policy_routes_to_running_worker_when_current_at_threshold() {
        let p = SchedulerPolicy { task_threshold: 4 };
        assert_eq!(p.decide(0, &[run(4), run(2), asleep()]), Assignment::Run(1));
    }

    #[test]
    fn policy_wakes_exactly_one_sleeper_when_all_running_busy() {
        let p = SchedulerPolicy { task_threshold: 4 };
        assert_eq!(p.decide(0, &[run(4), run(5), asleep(), asleep()]), Assignment::Wake(2));
    }

    #[test]
    fn policy_piles_on_least_loaded_when_everyone_busy() {
        let p = SchedulerPolicy { task_threshold: 4 };
        assert_eq!(p.decide(0, &[run(6), run(4), run(5)]), Assignment::Run(1));
    }

    #[test]
    fn policy_never_wakes_while_a_running_worker_has_room() {
        // Trace assertion: wake-ups occur only when every running worker is
        // at or over the threshold.
        use rand::prelude::*;
        let p = SchedulerPolicy { task_threshold: 4 };
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..2000 {
            let views: Vec<WorkerView> = (0..4)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        asleep()
                    } else {
                        run(rng.gen_range(0..8))
                    }
                })
                .collect();
            let current = rng.gen_range(0..views.len());
            if let Assignment::Wake(_) = p.decide(current, &views) {
                assert!(
                    views.iter().all(|w| w.sleeping || w.queue_len >= 4),
                    "woke a sleeper while {:?} had room",
                    views
                );
            }
        }
    }

    #[test]
    fn worker_pool_runs_jobs_and_wakes_sleepers() {
        let pool = WorkerPool::start(
            2,
            SchedulerPolicy { task_threshold: 4 },
            Duration::from_micros(100),
        );
        // Let workers go to sleep first.
        std::thread::sleep(Duration::from_millis(20));
        let counter = Arc::new(AtomicU64::new(0));
        for _ in 0..100 {
            let c = counter.clone();
            pool.schedule(Box::new(move || {
                c.fetch_add(1, Ordering::Relaxed);
            }));
        }
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while counter.load(Ordering::Relaxed) < 100 {
            assert!(std::time::Instant::now() < deadline);
            std::thread::yield_now();
        }
        assert!(pool.wakeups() >= 1, "sleeping workers must be woken");
        pool.shutdown();
    }
}
